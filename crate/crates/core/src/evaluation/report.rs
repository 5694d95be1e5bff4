use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::casedata::{case_group_of, CaseGroup, CaseRecord, Label, Rect, RoiBox, Side, SideLayout, View};
use crate::featurenet::SaliencyMap;
use crate::milpool::Paradigm;
use crate::model::CaseModel;
use crate::tensor::{ParamStore, TensorError};

use super::metrics::{
    attention_entropy, auc, box_iou_dsc, dataset_iou_dsc, f1, f1_score, proxy_from_attention,
    proxy_from_probability, IouMode,
};
use super::{ConfusionWithRoi, EvalError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub roi_match_threshold: f64,
    pub attention_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            roi_match_threshold: 0.1,
            attention_threshold: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrediction {
    pub side: Side,
    pub view: View,
    /// Candidate boxes with patch attentions.
    pub patches: Vec<(Rect, f64)>,
    pub saliency: SaliencyMap,
    /// Image weight in the fusion pooling.
    pub weight: f64,
    /// Fusion probability of the image (instance-space specs).
    pub prob: Option<f64>,
    pub label: Option<Label>,
    pub groundtruth: Vec<RoiBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CasePrediction {
    pub case_id: String,
    pub truth: Label,
    pub prob: f64,
    /// topt, local, fusion
    pub head_probs: [f64; 3],
    pub group: CaseGroup,
    pub images: Vec<ImagePrediction>,
}

pub fn predict_cases(
    model: &CaseModel,
    store: &ParamStore,
    cases: &[CaseRecord],
) -> Result<Vec<CasePrediction>, TensorError> {
    cases
        .iter()
        .map(|case| {
            let (prob, out, tape) = model.predict(store, case)?;
            let head_probs = out.heads.all().map(|v| tape.value(v).item());
            let images = case
                .images
                .iter()
                .zip(&out.bundles)
                .enumerate()
                .map(|(i, (img, b))| ImagePrediction {
                    side: img.side,
                    view: img.view,
                    patches: b.patches.iter().map(|c| (c.bbox, c.attention)).collect(),
                    saliency: b.saliency.clone(),
                    weight: out.image_weights[i],
                    prob: out.image_probs.as_ref().map(|p| p[i]),
                    label: img.image_label,
                    groundtruth: img.roi_boxes.clone(),
                })
                .collect();
            Ok(CasePrediction {
                case_id: case.case_id.clone(),
                truth: case.case_label,
                prob,
                head_probs,
                group: case_group_of(case),
                images,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub name: String,
    pub n: usize,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n_cases: usize,
    pub f1: f64,
    pub auc: Option<f64>,
    pub head_auc: [Option<f64>; 3],
    pub groups: Vec<GroupMetrics>,
    /// Keyed by `(scope, mode)`; scope is `all` (every groundtruth box) or
    /// `malignant` (malignant boxes of malignant cases).
    pub iou: BTreeMap<(String, &'static str), Option<(f64, f64)>>,
    pub entropy_malignant: Option<f64>,
    pub entropy_benign: Option<f64>,
    /// Means over 4-image cases only.
    pub entropy4_malignant: Option<f64>,
    pub entropy4_benign: Option<f64>,
    pub proxy_attention_f1: Option<f64>,
    pub proxy_probability_f1: Option<f64>,
    pub proxy_uniform_f1: Option<f64>,
    pub proxy_all_malignant_f1: Option<f64>,
    pub confusion: ConfusionWithRoi,
    /// Per-image dominance check: best-of-top-k IoU >= top-attention IoU.
    pub mode_dominance_holds: bool,
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn group_metrics(name: &str, preds: &[&CasePrediction]) -> GroupMetrics {
    let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let truth: Vec<bool> = preds.iter().map(|p| p.truth.is_malignant()).collect();
    GroupMetrics {
        name: name.to_string(),
        n: preds.len(),
        f1: if preds.is_empty() { 0.0 } else { f1(&probs, &truth) },
        auc: auc(&probs, &truth).ok(),
    }
}

pub const GROUP_NAMES: [&str; 8] = ["1L/1R", "nL/mR", "1L+1R", "nL+mR", "std", "4-std", "mix", "All"];

fn in_group(name: &str, g: &CaseGroup) -> bool {
    match name {
        "std" => g.standard,
        "4-std" => g.four_standard,
        "mix" => g.mixed,
        "All" => true,
        layout => SideLayout::ALL.iter().any(|l| l.token() == layout && *l == g.layout),
    }
}

/// Aggregates predictions into a report. `paradigm` decides whether
/// probability-based proxy labels are available.
pub fn evaluate(preds: &[CasePrediction], paradigm: Paradigm, cfg: &EvalConfig) -> MetricsReport {
    let probs: Vec<f64> = preds.iter().map(|p| p.prob).collect();
    let truth: Vec<bool> = preds.iter().map(|p| p.truth.is_malignant()).collect();
    let head_auc = [0, 1, 2].map(|h| {
        let s: Vec<f64> = preds.iter().map(|p| p.head_probs[h]).collect();
        auc(&s, &truth).ok()
    });

    let groups = GROUP_NAMES
        .iter()
        .filter_map(|&name| {
            let members: Vec<&CasePrediction> = preds.iter().filter(|p| in_group(name, &p.group)).collect();
            (!members.is_empty()).then(|| group_metrics(name, &members))
        })
        .collect();

    let mut iou = BTreeMap::new();
    let mut dominance = true;
    for scope in ["all", "malignant"] {
        let images: Vec<(Vec<(Rect, f64)>, Vec<Rect>)> = preds
            .iter()
            .filter(|p| scope == "all" || p.truth.is_malignant())
            .flat_map(|p| &p.images)
            .map(|img| {
                let gt = img
                    .groundtruth
                    .iter()
                    .filter(|b| scope == "all" || b.label.is_malignant())
                    .map(|b| b.rect)
                    .collect();
                (img.patches.clone(), gt)
            })
            .collect();
        for mode in IouMode::ALL {
            iou.insert((scope.to_string(), mode.name()), dataset_iou_dsc(&images, mode).ok());
        }
        for (c, g) in &images {
            let best = super::image_iou_dsc(c, g, IouMode::BestOfTopK);
            let top = super::image_iou_dsc(c, g, IouMode::TopAttention);
            if let (Some(b), Some(t)) = (best, top) {
                dominance &= b.0 >= t.0;
            }
        }
    }

    let entropy_of = |p: &CasePrediction| attention_entropy(&p.images.iter().map(|i| i.weight).collect::<Vec<_>>());
    let class_entropy = |malignant: bool, only4: bool| {
        let v: Vec<f64> = preds
            .iter()
            .filter(|p| p.truth.is_malignant() == malignant && (!only4 || p.images.len() == 4))
            .map(entropy_of)
            .collect();
        mean(&v)
    };

    // proxy image labels over truly malignant cases, images with known labels
    let mut img_truth = Vec::new();
    let (mut by_att, mut by_prob, mut by_uniform) = (Vec::new(), Vec::new(), Vec::new());
    for p in preds.iter().filter(|p| p.truth.is_malignant()) {
        let weights: Vec<f64> = p.images.iter().map(|i| i.weight).collect();
        let att = proxy_from_attention(&weights, cfg.attention_threshold);
        let uniform = proxy_from_attention(&vec![1.0 / weights.len() as f64; weights.len()], cfg.attention_threshold);
        let probs: Option<Vec<f64>> = p.images.iter().map(|i| i.prob).collect();
        let by_p = probs.map(|ps| proxy_from_probability(&ps));
        for (i, img) in p.images.iter().enumerate() {
            let Some(label) = img.label else { continue };
            img_truth.push(label.is_malignant());
            by_att.push(att[i]);
            by_uniform.push(uniform[i]);
            if let Some(bp) = &by_p {
                by_prob.push(bp[i]);
            }
        }
    }
    let have_proxy = !img_truth.is_empty();
    let proxy_probability_f1 = match paradigm {
        Paradigm::Instance if have_proxy && by_prob.len() == img_truth.len() => Some(f1_score(&by_prob, &img_truth)),
        _ => None,
    };

    let mut confusion = ConfusionWithRoi::default();
    for p in preds {
        let roi_found = p.images.iter().any(|img| {
            img.patches.iter().any(|(c, _)| {
                img.groundtruth
                    .iter()
                    .any(|g| box_iou_dsc(c, &g.rect).0 >= cfg.roi_match_threshold)
            })
        });
        confusion.add(p.truth.is_malignant(), p.prob > 0.5, roi_found);
    }

    MetricsReport {
        n_cases: preds.len(),
        f1: if preds.is_empty() { 0.0 } else { f1(&probs, &truth) },
        auc: auc(&probs, &truth).ok(),
        head_auc,
        groups,
        iou,
        entropy_malignant: class_entropy(true, false),
        entropy_benign: class_entropy(false, false),
        entropy4_malignant: class_entropy(true, true),
        entropy4_benign: class_entropy(false, true),
        proxy_attention_f1: have_proxy.then(|| f1_score(&by_att, &img_truth)),
        proxy_probability_f1,
        proxy_uniform_f1: have_proxy.then(|| f1_score(&by_uniform, &img_truth)),
        proxy_all_malignant_f1: have_proxy.then(|| f1_score(&vec![true; img_truth.len()], &img_truth)),
        confusion,
        mode_dominance_holds: dominance,
    }
}

/// Requests a probability-based proxy F1, failing under embedded space.
pub fn probability_proxy(report: &MetricsReport, paradigm: Paradigm) -> Result<Option<f64>, EvalError> {
    match paradigm {
        Paradigm::Embedded => Err(EvalError::NoImageProbabilities),
        Paradigm::Instance => Ok(report.proxy_probability_f1),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    pub fn group(&self, name: &str) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn iou_of(&self, scope: &str, mode: IouMode) -> Option<(f64, f64)> {
        self.iou.get(&(scope.to_string(), mode.name())).copied().flatten()
    }

    /// `metric.path = value` lines followed by the confusion block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("cases", self.n_cases.to_string());
        line("case.f1", format!("{:.6}", self.f1));
        line("case.auc", fmt_opt(self.auc));
        for (name, a) in ["topt", "local", "fusion"].iter().zip(self.head_auc) {
            line(&format!("head.{name}.auc"), fmt_opt(a));
        }
        for g in &self.groups {
            line(&format!("group.{}.n", g.name), g.n.to_string());
            line(&format!("group.{}.f1", g.name), format!("{:.6}", g.f1));
            line(&format!("group.{}.auc", g.name), fmt_opt(g.auc));
        }
        for ((scope, mode), v) in &self.iou {
            line(&format!("iou.{scope}.{mode}.iou"), fmt_opt(v.map(|x| x.0)));
            line(&format!("iou.{scope}.{mode}.dsc"), fmt_opt(v.map(|x| x.1)));
        }
        line("entropy.all.malignant_mean", fmt_opt(self.entropy_malignant));
        line("entropy.all.benign_mean", fmt_opt(self.entropy_benign));
        line("entropy.m4.malignant_mean", fmt_opt(self.entropy4_malignant));
        line("entropy.m4.benign_mean", fmt_opt(self.entropy4_benign));
        line("entropy.m4.uniform", format!("{:.6}", 4f64.ln()));
        line("proxy.attention.f1", fmt_opt(self.proxy_attention_f1));
        line("proxy.probability.f1", fmt_opt(self.proxy_probability_f1));
        line("proxy.baseline.uniform.f1", fmt_opt(self.proxy_uniform_f1));
        line("proxy.baseline.all_malignant.f1", fmt_opt(self.proxy_all_malignant_f1));
        line("roi.mode_dominance", self.mode_dominance_holds.to_string());
        let _ = writeln!(s, "confusion_with_roi:");
        let _ = writeln!(s, "{:<8} {}", "", ConfusionWithRoi::COLUMNS.join(" "));
        for (row, counts) in ConfusionWithRoi::ROWS.iter().zip(&self.confusion.counts) {
            let cells: Vec<String> = counts
                .iter()
                .zip(ConfusionWithRoi::COLUMNS)
                .map(|(c, h)| format!("{c:>w$}", w = h.len()))
                .collect();
            let _ = writeln!(s, "{row:<8} {}", cells.join(" "));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::casedata::LesionKind;

    fn pred(id: &str, truth: Label, prob: f64, weights: &[f64], labels: &[Label]) -> CasePrediction {
        let images = weights
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&w, &l))| ImagePrediction {
                side: if i < 2 { Side::L } else { Side::R },
                view: if i % 2 == 0 { View::CC } else { View::MLO },
                patches: vec![(Rect::new(0, 0, 4, 4), 1.0)],
                saliency: SaliencyMap {
                    values: crate::casedata::Grid::zeros(1, 1),
                    source_shape: (8, 8),
                },
                weight: w,
                prob: None,
                label: Some(l),
                groundtruth: if l.is_malignant() {
                    vec![RoiBox {
                        rect: Rect::new(0, 0, 4, 4),
                        kind: LesionKind::Mass,
                        label: l,
                    }]
                } else {
                    vec![]
                },
            })
            .collect();
        CasePrediction {
            case_id: id.into(),
            truth,
            prob,
            head_probs: [prob; 3],
            group: CaseGroup {
                layout: SideLayout::BothSidesMany,
                standard: true,
                four_standard: weights.len() == 4,
                mixed: false,
            },
            images,
        }
    }

    #[test]
    fn report_on_four_standard_cases() {
        use Label::*;
        let preds = vec![
            pred("a", Malignant, 0.9, &[0.7, 0.1, 0.1, 0.1], &[Malignant, Benign, Benign, Benign]),
            pred("b", Benign, 0.2, &[0.25; 4], &[Benign; 4]),
        ];
        let r = evaluate(&preds, Paradigm::Embedded, &EvalConfig::default());
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.proxy_attention_f1, Some(1.0));
        assert_eq!(r.proxy_uniform_f1, Some(0.0));
        assert_eq!(r.proxy_all_malignant_f1, Some(2.0 * 0.25 / 1.25));
        assert_eq!(r.proxy_probability_f1, None);
        assert_eq!(r.iou_of("malignant", IouMode::BestOfTopK), Some((1.0, 1.0)));
        assert_eq!(r.confusion.counts[1][2], 1);
        assert_eq!(r.confusion.counts[0][1], 1);
        let names: Vec<&str> = r.groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["nL+mR", "std", "4-std", "All"]);
        let text = r.to_text();
        assert!(text.contains("case.auc = 1.000000"));
        assert!(text.contains("M-Case"));
        assert!(probability_proxy(&r, Paradigm::Embedded).is_err());
    }

    #[test]
    fn single_class_group_is_na() {
        let preds = vec![pred("b", Label::Benign, 0.2, &[1.0], &[Label::Benign])];
        let r = evaluate(&preds, Paradigm::Instance, &EvalConfig::default());
        assert_eq!(r.group("All").unwrap().auc, None);
        assert!(r.to_text().contains("group.All.auc = n/a"));
    }
}
