use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CaseRecord, Side, View};

/// How a case's images are spread over the two breast sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SideLayout {
    /// `1L/1R`: a single image.
    Single,
    /// `nL/mR`: several images, all from one side.
    OneSideMany,
    /// `1L+1R`: exactly one image per side.
    OnePerSide,
    /// `nL+mR`: both sides, at least one with several images.
    BothSidesMany,
}

impl SideLayout {
    pub const ALL: [SideLayout; 4] = [
        SideLayout::Single,
        SideLayout::OneSideMany,
        SideLayout::OnePerSide,
        SideLayout::BothSidesMany,
    ];

    pub fn token(self) -> &'static str {
        match self {
            SideLayout::Single => "1L/1R",
            SideLayout::OneSideMany => "nL/mR",
            SideLayout::OnePerSide => "1L+1R",
            SideLayout::BothSidesMany => "nL+mR",
        }
    }
}

impl fmt::Display for SideLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CaseGroup {
    pub layout: SideLayout,
    /// Every view is CC or MLO.
    pub standard: bool,
    /// Exactly L-CC, L-MLO, R-CC, R-MLO.
    pub four_standard: bool,
    /// Some view is not CC or MLO.
    pub mixed: bool,
}

pub fn case_group_of(case: &CaseRecord) -> CaseGroup {
    let (left, right) = (case.side_count(Side::L), case.side_count(Side::R));
    let layout = match (left, right) {
        (l, r) if l + r == 1 => SideLayout::Single,
        (_, 0) | (0, _) => SideLayout::OneSideMany,
        (1, 1) => SideLayout::OnePerSide,
        _ => SideLayout::BothSidesMany,
    };
    let standard = case.images.iter().all(|i| i.view.is_standard());
    let four_standard = case.view_key()
        == [
            (Side::L, View::CC),
            (Side::L, View::MLO),
            (Side::R, View::CC),
            (Side::R, View::MLO),
        ];
    CaseGroup {
        layout,
        standard,
        four_standard,
        mixed: !standard,
    }
}

/// Partitions case indices into batches whose cases share one (side, view)
/// multiset. Membership and batch order are shuffled with `seed`.
pub fn group_batches(cases: &[CaseRecord], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut by_key: BTreeMap<Vec<(Side, View)>, Vec<usize>> = BTreeMap::new();
    for (i, case) in cases.iter().enumerate() {
        by_key.entry(case.view_key()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for (_, mut members) in by_key {
        members.shuffle(&mut rng);
        batches.extend(members.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Ordinary shuffled batching that ignores image combinations.
pub fn mixed_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
