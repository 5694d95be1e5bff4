//! Planted-lesion synthetic cases with full groundtruth.
//!
//! Images are produced directly in preprocessed space: chest wall on the
//! left edge, breast as a half-ellipse, background exactly zero. Benign
//! lesions are faint smooth blobs; malignant lesions are bright star-shaped
//! blobs. A malignant case carries its lesion on one side, in a non-empty
//! subset of that side's views at view-consistent positions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CaseDataError, CaseRecord, Grid, ImageRecord, Label, LesionKind, Rect, RoiBox, Side, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CaseShape {
    /// One image.
    Single,
    /// Two or three images of one side.
    OneSideMany,
    /// One image per side.
    OnePerSide,
    /// L-CC, L-MLO, R-CC, R-MLO.
    FourStandard,
    /// The four standard views plus one or two extra views.
    FourStandardExtra,
}

impl CaseShape {
    pub const ALL: [CaseShape; 5] = [
        CaseShape::Single,
        CaseShape::OneSideMany,
        CaseShape::OnePerSide,
        CaseShape::FourStandard,
        CaseShape::FourStandardExtra,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_cases: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub malignant_fraction: f64,
    /// Probability of each shape in [`CaseShape::ALL`] order.
    pub view_count_distribution: [f64; 5],
    pub lesion_contrast: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Probability that a case carries a benign lesion.
    pub benign_lesion_rate: f64,
    /// Lesion radius as a fraction of the image width.
    pub lesion_radius: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_cases: 200,
            image_height: 64,
            image_width: 48,
            malignant_fraction: 0.3,
            view_count_distribution: [0.075, 0.075, 0.075, 0.7, 0.075],
            lesion_contrast: 0.6,
            seed: 17,
            train_fraction: 0.7,
            val_fraction: 0.1,
            benign_lesion_rate: 0.5,
            lesion_radius: 0.1,
        }
    }
}

impl SyntheticConfig {
    /// 600 / 80 / 160 cases, seed 17, 64x48, 30% malignant, contrast 0.6.
    pub fn reference() -> Self {
        SyntheticConfig {
            n_cases: 840,
            train_fraction: 600.0 / 840.0,
            val_fraction: 80.0 / 840.0,
            ..SyntheticConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), CaseDataError> {
        let err = |m: String| Err(CaseDataError::Config(m));
        let dist = &self.view_count_distribution;
        if dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return err(format!("negative or non-finite case-shape probability in {dist:?}"));
        }
        let total: f64 = dist.iter().sum();
        if total == 0.0 {
            return err("view_count_distribution has zero mass".into());
        }
        if (total - 1.0).abs() > 1e-9 {
            return err(format!("view_count_distribution sums to {total}, not 1"));
        }
        if !(self.malignant_fraction > 0.0 && self.malignant_fraction < 1.0) {
            return err(format!("malignant_fraction {} outside (0,1)", self.malignant_fraction));
        }
        if self.image_height < 8 || self.image_width < 8 {
            return err("images must be at least 8x8".into());
        }
        if self.n_cases == 0 {
            return err("n_cases must be positive".into());
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v >= 0.0 && t + v <= 1.0) {
            return err(format!("split fractions {t}/{v} invalid"));
        }
        if !(self.lesion_contrast > 0.0) || !(self.lesion_radius > 0.0) {
            return err("lesion_contrast and lesion_radius must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.benign_lesion_rate) {
            return err("benign_lesion_rate outside [0,1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplits {
    pub train: Vec<CaseRecord>,
    pub val: Vec<CaseRecord>,
    pub test: Vec<CaseRecord>,
}

/// Label-stratified split of case indices into train / val / test; each
/// part is returned in ascending index order.
pub fn stratified_split(
    labels: &[Label],
    train_fraction: f64,
    val_fraction: f64,
    rng: &mut impl Rng,
) -> [Vec<usize>; 3] {
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in [Label::Benign, Label::Malignant] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(rng);
        let n = members.len() as f64;
        let n_train = ((n * train_fraction).round() as usize).min(members.len());
        let n_val = ((n * val_fraction).round() as usize).min(members.len() - n_train);
        parts[0].extend_from_slice(&members[..n_train]);
        parts[1].extend_from_slice(&members[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&members[n_train + n_val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    parts
}

struct BreastShape {
    depth: f64,
    half_height: f64,
    centre: f64,
}

#[derive(Clone, Copy)]
struct LesionSite {
    /// Depth from the chest wall as a fraction of breast depth.
    u: f64,
    /// Vertical offset as a fraction of the local half-height.
    v: f64,
    radius: f64,
}

fn view_shape(base: &BreastShape, view: View, h: f64, rng: &mut impl Rng) -> BreastShape {
    let (stretch, shift) = match view {
        View::CC => (1.0, 0.0),
        View::MLO => (1.06, 0.03),
        _ => (1.0 + rng.gen_range(-0.04..0.04), rng.gen_range(-0.03..0.03)),
    };
    BreastShape {
        depth: base.depth * (2.0 - stretch),
        half_height: base.half_height * stretch,
        centre: base.centre + shift * h,
    }
}

fn site_centre(shape: &BreastShape, site: &LesionSite) -> (f64, f64) {
    let x = site.u * shape.depth;
    let local = shape.half_height * (1.0 - site.u * site.u).sqrt();
    (shape.centre + site.v * local, x)
}

/// Smoothed uniform noise in roughly [-1, 1].
fn texture(h: usize, w: usize, rng: &mut impl Rng) -> Grid {
    let mut g = Grid::from_fn(h, w, |_, _| 0.0);
    for v in g.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for _ in 0..2 {
        let src = g.clone();
        g = Grid::from_fn(h, w, |y, x| {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(2)..(y + 3).min(h) {
                for xx in x.saturating_sub(2)..(x + 3).min(w) {
                    s += src.get(yy, xx);
                    n += 1.0;
                }
            }
            s / n
        });
    }
    let peak = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    g.data_mut().iter_mut().for_each(|v| *v /= peak);
    g
}

/// Renders a lesion profile into `layer` and returns its tight bounding box.
fn render_lesion(
    layer: &mut Grid,
    (cy, cx): (f64, f64),
    radius: f64,
    amplitude: f64,
    spikes: Option<(f64, f64)>,
) -> Option<Rect> {
    let (h, w) = (layer.height(), layer.width());
    let reach = radius * 1.3 + 1.0;
    let ys = ((cy - reach).floor().max(0.0) as usize)..((cy + reach).ceil().min(h as f64) as usize);
    let xs = ((cx - reach).floor().max(0.0) as usize)..((cx + reach).ceil().min(w as f64) as usize);
    let mut bbox: Option<Rect> = None;
    for y in ys {
        for x in xs.clone() {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let d = (dy * dy + dx * dx).sqrt();
            let value = match spikes {
                Some((n, phase)) => {
                    let theta = dy.atan2(dx);
                    let spike = (0.5 * n * theta + phase).cos().abs().powi(6);
                    let edge = radius * (0.55 + 0.6 * spike);
                    amplitude * (edge - d + 0.5).clamp(0.0, 1.0)
                }
                None => amplitude * (-2.0 * (d / radius).powi(2)).exp(),
            };
            if value > 0.05 * amplitude {
                let v = layer.get(y, x).max(value);
                layer.set(y, x, v);
                let r = bbox.get_or_insert(Rect::new(x, y, x + 1, y + 1));
                r.x0 = r.x0.min(x);
                r.y0 = r.y0.min(y);
                r.x1 = r.x1.max(x + 1);
                r.y1 = r.y1.max(y + 1);
            }
        }
    }
    bbox
}

struct Planted {
    site: LesionSite,
    label: Label,
    spikes: Option<(f64, f64)>,
}

fn views_for(shape: CaseShape, rng: &mut impl Rng) -> Vec<(Side, View)> {
    let side = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { Side::L } else { Side::R };
    let std_view = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.5) { View::CC } else { View::MLO };
    let extra = |rng: &mut ChaCha8Rng| *[View::LM, View::ML, View::XCCL].choose(rng).unwrap();
    // Re-seed a local stream so every shape consumes the caller's RNG identically.
    let mut local = ChaCha8Rng::seed_from_u64(rng.gen());
    let r = &mut local;
    let mut views = match shape {
        CaseShape::Single => vec![(side(r), std_view(r))],
        CaseShape::OneSideMany => {
            let s = side(r);
            let mut v = vec![(s, View::CC), (s, View::MLO)];
            if r.gen_bool(0.3) {
                v.push((s, extra(r)));
            }
            v
        }
        CaseShape::OnePerSide => vec![(Side::L, std_view(r)), (Side::R, std_view(r))],
        CaseShape::FourStandard | CaseShape::FourStandardExtra => {
            let mut v = vec![
                (Side::L, View::CC),
                (Side::L, View::MLO),
                (Side::R, View::CC),
                (Side::R, View::MLO),
            ];
            if shape == CaseShape::FourStandardExtra {
                let s = side(r);
                v.push((s, extra(r)));
                if r.gen_bool(0.3) {
                    let other = if s == Side::L { Side::R } else { Side::L };
                    v.push((other, extra(r)));
                }
            }
            v
        }
    };
    views.sort();
    views
}

fn random_site(cfg: &SyntheticConfig, rng: &mut impl Rng) -> LesionSite {
    LesionSite {
        u: rng.gen_range(0.2..0.65),
        v: rng.gen_range(-0.55..0.55),
        radius: cfg.lesion_radius * cfg.image_width as f64 * rng.gen_range(0.85..1.15),
    }
}

/// Picks one present side and a non-empty subset of its image indices.
fn pick_images(views: &[(Side, View)], rng: &mut impl Rng) -> Vec<usize> {
    let mut sides: Vec<Side> = views.iter().map(|v| v.0).collect();
    sides.dedup();
    let side = *sides.choose(rng).unwrap();
    let candidates: Vec<usize> = (0..views.len()).filter(|&i| views[i].0 == side).collect();
    let mut chosen: Vec<usize> = candidates.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
    if chosen.is_empty() {
        chosen.push(*candidates.choose(rng).unwrap());
    }
    chosen
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

fn make_case(
    cfg: &SyntheticConfig,
    case_id: String,
    malignant: bool,
    shape: CaseShape,
    rng: &mut ChaCha8Rng,
) -> Result<CaseRecord, CaseDataError> {
    let (h, w) = (cfg.image_height, cfg.image_width);
    let (hf, wf) = (h as f64, w as f64);
    let views = views_for(shape, rng);

    let mut planted: Vec<Vec<Planted>> = (0..views.len()).map(|_| Vec::new()).collect();
    if malignant {
        let site = random_site(cfg, rng);
        let spikes = (rng.gen_range(5..9) as f64, rng.gen_range(0.0..std::f64::consts::TAU));
        for i in pick_images(&views, rng) {
            planted[i].push(Planted {
                site,
                label: Label::Malignant,
                spikes: Some(spikes),
            });
        }
    }
    if rng.gen_bool(cfg.benign_lesion_rate) {
        let mut site = random_site(cfg, rng);
        let targets = pick_images(&views, rng);
        // keep lesions apart when they share an image
        for _ in 0..8 {
            let clash = targets.iter().any(|&i| {
                planted[i].iter().any(|p| {
                    let (du, dv) = (p.site.u - site.u, p.site.v - site.v);
                    (du * du + dv * dv).sqrt() < 0.3
                })
            });
            if !clash {
                break;
            }
            site = random_site(cfg, rng);
        }
        for i in targets {
            planted[i].push(Planted {
                site,
                label: Label::Benign,
                spikes: None,
            });
        }
    }

    let mut bases = [None, None];
    let mut images = Vec::with_capacity(views.len());
    for (i, &(side, view)) in views.iter().enumerate() {
        let base = bases[side as usize].get_or_insert_with(|| BreastShape {
            depth: wf * rng.gen_range(0.72..0.92),
            half_height: hf * rng.gen_range(0.38..0.47),
            centre: hf * (0.5 + rng.gen_range(-0.03..0.03)),
        });
        let shape = view_shape(base, view, hf, rng);
        let noise = texture(h, w, rng);
        let tissue_level = rng.gen_range(0.36..0.46);
        let mut lesions = Grid::zeros(h, w);
        let mut roi_boxes = Vec::new();
        for p in &planted[i] {
            let amplitude = match p.label {
                Label::Malignant => cfg.lesion_contrast,
                Label::Benign => 0.3 * cfg.lesion_contrast,
            };
            let jitter = rng.gen_range(0.95..1.05);
            let centre = site_centre(&shape, &p.site);
            if let Some(rect) = render_lesion(&mut lesions, centre, p.site.radius * jitter, amplitude, p.spikes) {
                roi_boxes.push(RoiBox {
                    rect,
                    kind: LesionKind::Mass,
                    label: p.label,
                });
            }
        }
        let pixels = Grid::from_fn(h, w, |y, x| {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let ex = px / shape.depth;
            let ey = (py - shape.centre) / shape.half_height;
            let rho2 = ex * ex + ey * ey;
            if rho2 > 1.0 {
                return 0.0;
            }
            let falloff = 1.0 - 0.35 * rho2.powf(1.5);
            let tissue = (tissue_level + 0.1 * noise.get(y, x)) * falloff;
            quantize(tissue + lesions.get(y, x))
        });
        let image_label = Label::from_bool(roi_boxes.iter().any(|b| b.label.is_malignant()));
        images.push(ImageRecord {
            side,
            view,
            pixels,
            image_label: Some(image_label),
            roi_boxes,
            source_path: format!("images/{case_id}_{side}_{view}.pgm"),
        });
    }
    CaseRecord::new(case_id, images, Label::from_bool(malignant))
}

fn sample_shape(dist: &[f64; 5], rng: &mut impl Rng) -> CaseShape {
    let total: f64 = dist.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (shape, &p) in CaseShape::ALL.iter().zip(dist) {
        if u < p {
            return *shape;
        }
        u -= p;
    }
    *CaseShape::ALL
        .iter()
        .zip(dist)
        .rev()
        .find(|(_, &p)| p > 0.0)
        .unwrap()
        .0
}

/// Deterministic given `config.seed`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticSplits, CaseDataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_malignant = ((config.n_cases as f64 * config.malignant_fraction).round() as usize)
        .clamp(1, config.n_cases.saturating_sub(1).max(1));
    let mut labels: Vec<Label> = (0..config.n_cases)
        .map(|i| Label::from_bool(i < n_malignant))
        .collect();
    labels.shuffle(&mut rng);

    let mut cases = Vec::with_capacity(config.n_cases);
    for (i, label) in labels.iter().enumerate() {
        let shape = sample_shape(&config.view_count_distribution, &mut rng);
        cases.push(make_case(
            config,
            format!("syn{i:05}"),
            label.is_malignant(),
            shape,
            &mut rng,
        )?);
    }
    let [train, val, test] =
        stratified_split(&labels, config.train_fraction, config.val_fraction, &mut rng);
    let mut slots: Vec<Option<CaseRecord>> = cases.into_iter().map(Some).collect();
    let mut take = |idx: Vec<usize>| -> Vec<CaseRecord> {
        idx.into_iter().map(|i| slots[i].take().unwrap()).collect()
    };
    Ok(SyntheticSplits {
        train: take(train),
        val: take(val),
        test: take(test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casedata::case_group_of;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_cases: 100,
            malignant_fraction: 0.5,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 18, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn malignant_cases_carry_malignant_rois() {
        let s = generate_synthetic(&small()).unwrap();
        for case in s.train.iter().chain(&s.val).chain(&s.test) {
            let has = case.images.iter().any(|i| i.has_malignant_roi());
            assert_eq!(has, case.case_label.is_malignant(), "{}", case.case_id);
            for img in &case.images {
                assert_eq!(img.image_label, Some(Label::from_bool(img.has_malignant_roi())));
                img.validate().unwrap();
            }
        }
    }

    #[test]
    fn four_standard_only() {
        let cfg = SyntheticConfig {
            view_count_distribution: [0.0, 0.0, 0.0, 1.0, 0.0],
            ..small()
        };
        let s = generate_synthetic(&cfg).unwrap();
        for case in s.train.iter().chain(&s.val).chain(&s.test) {
            assert!(case_group_of(case).four_standard);
        }
    }

    #[test]
    fn zero_mass_distribution_rejected() {
        let cfg = SyntheticConfig {
            view_count_distribution: [0.0; 5],
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(CaseDataError::Config(_))));
    }

    #[test]
    fn reference_split_sizes() {
        let cfg = SyntheticConfig::reference();
        let labels: Vec<Label> = (0..840).map(|i| Label::from_bool(i < 252)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let [tr, va, te] = stratified_split(&labels, cfg.train_fraction, cfg.val_fraction, &mut rng);
        assert_eq!((tr.len(), va.len(), te.len()), (600, 80, 160));
    }
}
