use casemil::casedata::Rect;
use casemil::evaluation::{auc, box_iou_dsc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if truth[i] && !truth[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for instance in 0..200 {
        let n = rng.gen_range(2..60);
        let tied = instance % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.gen();
                if tied {
                    (s * 5.0).round() / 5.0
                } else {
                    s
                }
            })
            .collect();
        let mut truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        truth[0] = true;
        truth[1] = false;
        let got = auc(&scores, &truth).unwrap();
        let want = brute_auc(&scores, &truth);
        assert!((got - want).abs() <= 1e-12, "instance {instance}: {got} vs {want}");
    }
}

fn random_box(rng: &mut impl Rng) -> Rect {
    let (x0, y0) = (rng.gen_range(0..25), rng.gen_range(0..25));
    Rect::new(x0, y0, rng.gen_range(x0 + 1..=30), rng.gen_range(y0 + 1..=30))
}

fn raster(r: &Rect) -> Vec<bool> {
    (0..30 * 30).map(|i| r.contains(i / 30, i % 30)).collect()
}

#[test]
fn iou_dsc_match_rasterization() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for pair in 0..500 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (ra, rb) = (raster(&a), raster(&b));
        let inter = ra.iter().zip(&rb).filter(|(x, y)| **x && **y).count();
        let union = ra.iter().zip(&rb).filter(|(x, y)| **x || **y).count();
        let (na, nb) = (ra.iter().filter(|x| **x).count(), rb.iter().filter(|x| **x).count());
        let (iou, dsc) = box_iou_dsc(&a, &b);
        assert_eq!(iou, inter as f64 / union as f64, "pair {pair}: {a:?} {b:?}");
        assert_eq!(dsc, 2.0 * inter as f64 / (na + nb) as f64, "pair {pair}");
        assert!((dsc - 2.0 * iou / (1.0 + iou)).abs() <= 1e-12, "pair {pair}");
    }
}
