use crate::casedata::Rect;

use super::EvalError;

/// Binary F1 of the positive class; 0 when there are no true positives.
pub fn f1_score(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "f1: length mismatch");
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// F1 with predictions `probability > 0.5`.
pub fn f1(probs: &[f64], truth: &[bool]) -> f64 {
    let pred: Vec<bool> = probs.iter().map(|&p| p > 0.5).collect();
    f1_score(&pred, truth)
}

/// Rank-based AUC (Mann-Whitney U over all positive/negative pairs, ties
/// counted one half).
pub fn auc(scores: &[f64], truth: &[bool]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), truth.len(), "auc: length mismatch");
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum over positives of (#negatives below + 0.5 * #negatives tied)
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos_tied = order[i..j].iter().filter(|&&k| truth[k]).count();
        let neg_tied = (j - i) - pos_tied;
        wins += pos_tied as f64 * (neg_below as f64 + 0.5 * neg_tied as f64);
        neg_below += neg_tied;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

/// Pixel-count IoU and Dice of two half-open boxes.
pub fn box_iou_dsc(a: &Rect, b: &Rect) -> (f64, f64) {
    let inter = a.intersection(b) as f64;
    let (aa, ba) = (a.area() as f64, b.area() as f64);
    let union = aa + ba - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let dsc = if aa + ba > 0.0 { 2.0 * inter / (aa + ba) } else { 0.0 };
    (iou, dsc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IouMode {
    /// Best pair over all candidates and groundtruths.
    BestOfTopK,
    /// Per groundtruth best candidate, averaged over groundtruths.
    MeanAllRois,
    /// The candidate with the highest patch attention only.
    TopAttention,
}

impl IouMode {
    pub const ALL: [IouMode; 3] = [IouMode::BestOfTopK, IouMode::MeanAllRois, IouMode::TopAttention];

    pub fn name(self) -> &'static str {
        match self {
            IouMode::BestOfTopK => "best_of_topk",
            IouMode::MeanAllRois => "mean_all_rois",
            IouMode::TopAttention => "top_attention",
        }
    }
}

fn best_match(c: &Rect, gt: &[Rect]) -> (f64, f64) {
    gt.iter()
        .map(|g| box_iou_dsc(c, g))
        .fold((0.0f64, 0.0f64), |(bi, bd), (i, d)| (bi.max(i), bd.max(d)))
}

/// Per-image IoU/DSC of candidate boxes (with patch attentions) against
/// groundtruth; `None` when the image has no groundtruth.
pub fn image_iou_dsc(candidates: &[(Rect, f64)], gt: &[Rect], mode: IouMode) -> Option<(f64, f64)> {
    if gt.is_empty() {
        return None;
    }
    if candidates.is_empty() {
        return Some((0.0, 0.0));
    }
    Some(match mode {
        IouMode::BestOfTopK => candidates
            .iter()
            .map(|(c, _)| best_match(c, gt))
            .fold((0.0f64, 0.0f64), |(bi, bd), (i, d)| (bi.max(i), bd.max(d))),
        IouMode::MeanAllRois => {
            let (mut si, mut sd) = (0.0, 0.0);
            for g in gt {
                let (i, d) = candidates
                    .iter()
                    .map(|(c, _)| box_iou_dsc(c, g))
                    .fold((0.0f64, 0.0f64), |(bi, bd), (i, d)| (bi.max(i), bd.max(d)));
                si += i;
                sd += d;
            }
            (si / gt.len() as f64, sd / gt.len() as f64)
        }
        IouMode::TopAttention => {
            let mut top = 0;
            for (j, (_, a)) in candidates.iter().enumerate() {
                if *a > candidates[top].1 {
                    top = j;
                }
            }
            best_match(&candidates[top].0, gt)
        }
    })
}

/// Mean over images that have groundtruth.
pub fn dataset_iou_dsc(
    images: &[(Vec<(Rect, f64)>, Vec<Rect>)],
    mode: IouMode,
) -> Result<(f64, f64), EvalError> {
    let scores: Vec<(f64, f64)> = images
        .iter()
        .filter_map(|(c, g)| image_iou_dsc(c, g, mode))
        .collect();
    if scores.is_empty() {
        return Err(EvalError::NoGroundtruth);
    }
    let n = scores.len() as f64;
    Ok((
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}

/// `-sum a ln a` with `0 ln 0 = 0`.
pub fn attention_entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * a.ln())
        .sum::<f64>()
}

/// Image is proxy-malignant when its attention exceeds `threshold`.
pub fn proxy_from_attention(weights: &[f64], threshold: f64) -> Vec<bool> {
    weights.iter().map(|&a| a > threshold).collect()
}

/// Image is proxy-malignant when its probability exceeds 0.5.
pub fn proxy_from_probability(probs: &[f64]) -> Vec<bool> {
    probs.iter().map(|&p| p > 0.5).collect()
}
