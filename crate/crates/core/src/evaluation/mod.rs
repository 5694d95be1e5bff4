//! Case metrics (F1, AUC), ROI localization (IoU/DSC), attention entropy,
//! proxy image labels, confusion-with-ROI and per-group reports.

mod metrics;
mod report;

pub use metrics::{
    attention_entropy, auc, box_iou_dsc, dataset_iou_dsc, f1, f1_score, image_iou_dsc, proxy_from_attention,
    proxy_from_probability, IouMode,
};
pub use report::{
    evaluate, predict_cases, probability_proxy, CasePrediction, EvalConfig, GroupMetrics, ImagePrediction,
    MetricsReport, GROUP_NAMES,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("AUC undefined: only one class present")]
    AucUndefined,
    #[error("no groundtruth boxes in dataset")]
    NoGroundtruth,
    #[error("image probabilities unavailable for embedded-space pooling")]
    NoImageProbabilities,
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Rows `{B-Case, M-Case}` by columns `{B+ROI, B+noROI, M+ROI, M+noROI}`
/// (predicted label, whether a candidate matched groundtruth).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionWithRoi {
    pub counts: [[usize; 4]; 2],
}

impl ConfusionWithRoi {
    pub const ROWS: [&'static str; 2] = ["B-Case", "M-Case"];
    pub const COLUMNS: [&'static str; 4] = ["B+ROI", "B+noROI", "M+ROI", "M+noROI"];

    pub fn add(&mut self, truth_malignant: bool, pred_malignant: bool, roi_found: bool) {
        let col = match (pred_malignant, roi_found) {
            (false, true) => 0,
            (false, false) => 1,
            (true, true) => 2,
            (true, false) => 3,
        };
        self.counts[truth_malignant as usize][col] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

pub fn confusion_with_roi(truth: &[bool], pred: &[bool], roi_found: &[bool]) -> ConfusionWithRoi {
    let mut c = ConfusionWithRoi::default();
    for ((&t, &p), &r) in truth.iter().zip(pred).zip(roi_found) {
        c.add(t, p, r);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_cells() {
        let c = confusion_with_roi(&[true, false, false], &[true, false, true], &[true, false, false]);
        assert_eq!(c.counts[1][2], 1);
        assert_eq!(c.counts[0][1], 1);
        assert_eq!(c.counts[0][3], 1);
        assert_eq!(c.total(), 3);
    }
}
