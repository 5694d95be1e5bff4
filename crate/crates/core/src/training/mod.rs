//! Case loss, optimizers, default and dynamic stepping, and the epoch loop
//! with early stopping on validation AUC.

mod dynamic;
mod optim;

pub use dynamic::{participating_components, ComponentRegistry, SnapshotStore};
pub use optim::{OptimizerKind, OptimizerState, Slot};

use std::fmt;

use thiserror::Error;

use crate::casedata::{case_group_of, group_batches, mixed_batches, CaseRecord, Label};
use crate::evaluation::{auc, f1};
use crate::model::{CaseHeads, CaseModel};
use crate::tensor::{ParamStore, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training split")]
    EmptyTrainingSplit,
    #[error("batch mixes cases with different image combinations")]
    HeterogeneousBatch,
    #[error("non-finite {head} head output")]
    NonFiniteLoss { head: &'static str },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Probability clamp inside the cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Saliency L1 coefficient.
    pub beta: f64,
    /// Weight of the malignant term.
    pub pos_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 1e-4,
            pos_weight: 1.0,
        }
    }
}

/// `#benign / #malignant`; 1 when either class is absent.
pub fn auto_pos_weight(cases: &[CaseRecord]) -> f64 {
    let m = cases.iter().filter(|c| c.case_label.is_malignant()).count();
    let b = cases.len() - m;
    if m == 0 || b == 0 {
        1.0
    } else {
        b as f64 / m as f64
    }
}

/// Weighted BCE over the three heads plus `beta` times the L1 norm of the
/// saliency maps.
pub fn case_loss(
    tape: &mut Tape,
    y: Label,
    heads: &CaseHeads,
    saliency: &[Var],
    cfg: &LossConfig,
) -> Result<Var, TrainError> {
    let mut terms = Vec::with_capacity(4);
    for (name, head) in ["topt", "local", "fusion"].into_iter().zip(heads.all()) {
        if !tape.value(head).item().is_finite() {
            return Err(TrainError::NonFiniteLoss { head: name });
        }
        let p = tape.clamp(head, PROB_EPS, 1.0 - PROB_EPS)?;
        let term = match y {
            Label::Malignant => {
                let l = tape.log(p)?;
                tape.scale(l, -cfg.pos_weight)?
            }
            Label::Benign => {
                let q = tape.one_minus(p)?;
                let l = tape.log(q)?;
                tape.scale(l, -1.0)?
            }
        };
        terms.push(term);
    }
    if cfg.beta != 0.0 {
        let mut l1 = Vec::with_capacity(saliency.len());
        for &s in saliency {
            let a = tape.abs(s)?;
            l1.push(tape.sum(a, None)?);
        }
        let mut total = l1[0];
        for &t in &l1[1..] {
            total = tape.add(total, t)?;
        }
        terms.push(tape.scale(total, cfg.beta)?);
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Default,
    Dynamic,
    /// Default stepping on the four-standard-view training cases only.
    FixedImage,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Default => "default",
            Scheme::Dynamic => "dynamic",
            Scheme::FixedImage => "fixed-image",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "default" => Ok(Scheme::Default),
            "dynamic" => Ok(Scheme::Dynamic),
            "fixed-image" => Ok(Scheme::FixedImage),
            _ => Err(format!("unknown scheme `{s}` (default | dynamic | fixed-image)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Batching {
    /// Batches share one image combination.
    Grouped,
    /// Plain shuffled batches.
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta: f64,
    /// `None` derives it from the training split.
    pub pos_weight: Option<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub scheme: Scheme,
    pub batching: Batching,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::adam(),
            lr: 1e-4,
            weight_decay: 1e-5,
            beta: 1e-4,
            pos_weight: None,
            batch_size: 4,
            max_epochs: 30,
            patience: 10,
            scheme: Scheme::Default,
            batching: Batching::Grouped,
            shuffle_seed: 0,
        }
    }
}

/// Mutable training state for one model.
#[derive(Debug, Clone)]
pub struct Trainer<'m> {
    pub model: &'m CaseModel,
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub registry: ComponentRegistry,
    pub snapshots: SnapshotStore,
    pub loss: LossConfig,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub losses: Vec<f64>,
    pub probs: Vec<f64>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m CaseModel, store: ParamStore, optimizer: OptimizerState, loss: LossConfig) -> Self {
        let registry = ComponentRegistry::from_store(&store);
        let snapshots = SnapshotStore::new(&registry, &store, &optimizer);
        Trainer {
            model,
            store,
            optimizer,
            registry,
            snapshots,
            loss,
            steps: 0,
        }
    }

    /// Forward, backward and loss bookkeeping; leaves gradients in the store.
    fn accumulate(&mut self, batch: &[&CaseRecord]) -> Result<StepStats, TrainError> {
        self.store.zero_grad();
        let mut tape = Tape::new();
        let p = tape.bind(&self.store);
        let mut stats = StepStats {
            losses: Vec::new(),
            probs: Vec::new(),
        };
        let mut total: Option<Var> = None;
        for case in batch {
            let out = self.model.forward(&mut tape, &p, case, None)?;
            let sal: Vec<Var> = out.bundles.iter().map(|b| b.saliency_var).collect();
            let loss = case_loss(&mut tape, case.case_label, &out.heads, &sal, &self.loss)?;
            stats.losses.push(tape.value(loss).item());
            stats.probs.push(tape.value(out.heads.y_fusion).item());
            total = Some(match total {
                Some(t) => tape.add(t, loss)?,
                None => loss,
            });
        }
        if let Some(t) = total {
            let mean = tape.scale(t, 1.0 / batch.len() as f64)?;
            tape.backward_into(mean, &mut self.store)?;
        }
        Ok(stats)
    }

    /// Steps every parameter the optimizer owns.
    pub fn default_step(&mut self, batch: &[&CaseRecord]) -> Result<StepStats, TrainError> {
        let stats = self.accumulate(batch)?;
        self.optimizer.step(&mut self.store);
        self.steps += 1;
        Ok(stats)
    }

    /// Steps everything, then rolls non-participating components back to
    /// their snapshots and refreshes the snapshots of participating ones.
    pub fn dynamic_step(&mut self, batch: &[&CaseRecord]) -> Result<StepStats, TrainError> {
        let parts = participating_components(batch, self.model.spec())?;
        let stats = self.default_step(batch)?;
        let components: Vec<String> = self.registry.components().map(str::to_string).collect();
        for c in components {
            if parts.contains(&c) {
                self.snapshots
                    .refresh(&self.registry, &c, &self.store, &self.optimizer, self.steps);
            } else {
                self.snapshots.restore(&c, &mut self.store, &mut self.optimizer);
            }
        }
        Ok(stats)
    }
}

/// Mean case loss and final probabilities without updating anything.
pub fn evaluate_loss(
    model: &CaseModel,
    store: &ParamStore,
    cases: &[CaseRecord],
    loss: &LossConfig,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut total = 0.0;
    let mut probs = Vec::with_capacity(cases.len());
    for case in cases {
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let out = model.forward(&mut tape, &p, case, None)?;
        let sal: Vec<Var> = out.bundles.iter().map(|b| b.saliency_var).collect();
        let l = case_loss(&mut tape, case.case_label, &out.heads, &sal, loss)?;
        total += tape.value(l).item();
        probs.push(tape.value(out.heads.y_fusion).item());
    }
    Ok((total / cases.len().max(1) as f64, probs))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub epochs_run: usize,
    pub log: Vec<String>,
    pub pos_weight: f64,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"))
}

fn log_line(epoch: usize, split: &str, loss: f64, probs: &[f64], cases: &[&CaseRecord]) -> String {
    let truth: Vec<bool> = cases.iter().map(|c| c.case_label.is_malignant()).collect();
    let f = if probs.is_empty() { 0.0 } else { f1(probs, &truth) };
    let a = auc(probs, &truth).ok();
    format!("epoch={epoch} split={split} loss={loss:.6} f1={f:.6} auc={}", fmt_metric(a))
}

/// Batches for one epoch as index lists into `cases`.
pub fn epoch_batches(cases: &[CaseRecord], cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let seed = cfg.shuffle_seed.wrapping_add(epoch as u64);
    match cfg.batching {
        Batching::Grouped => group_batches(cases, cfg.batch_size, seed),
        Batching::Mixed => mixed_batches(cases.len(), cfg.batch_size, seed),
    }
}

/// Runs up to `max_epochs`, keeping the parameters of the best validation
/// epoch. `on_log` receives each log line as it is produced.
pub fn train(
    model: &CaseModel,
    store: ParamStore,
    train_cases: &[CaseRecord],
    val_cases: &[CaseRecord],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&str),
) -> Result<TrainOutcome, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    if cfg.scheme == Scheme::Dynamic && cfg.batching == Batching::Mixed {
        return Err(TrainError::Config(
            "dynamic training needs batches grouped by image combination".into(),
        ));
    }
    let filtered: Vec<CaseRecord>;
    let train_cases = if cfg.scheme == Scheme::FixedImage {
        filtered = train_cases
            .iter()
            .filter(|c| case_group_of(c).four_standard)
            .cloned()
            .collect();
        &filtered[..]
    } else {
        train_cases
    };
    if train_cases.is_empty() {
        return Err(TrainError::EmptyTrainingSplit);
    }
    let pos_weight = cfg.pos_weight.unwrap_or_else(|| auto_pos_weight(train_cases));
    let loss = LossConfig {
        beta: cfg.beta,
        pos_weight,
    };
    let optimizer = OptimizerState::new(cfg.optimizer, cfg.lr, cfg.weight_decay, &store);
    let mut trainer = Trainer::new(model, store, optimizer, loss);

    let mut best = trainer.store.clone();
    // (val AUC, -val loss), compared lexicographically; AUC is skipped when
    // undefined
    let mut best_score = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_epoch = 0;
    let mut best_val_auc = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut epochs_run = 0;
    let val_refs: Vec<&CaseRecord> = val_cases.iter().collect();

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut losses = Vec::new();
        let mut probs = Vec::new();
        let mut seen = Vec::new();
        for idx in epoch_batches(train_cases, cfg, epoch) {
            let batch: Vec<&CaseRecord> = idx.iter().map(|&i| &train_cases[i]).collect();
            let stats = match cfg.scheme {
                Scheme::Dynamic => trainer.dynamic_step(&batch)?,
                Scheme::Default | Scheme::FixedImage => trainer.default_step(&batch)?,
            };
            losses.extend(stats.losses);
            probs.extend(stats.probs);
            seen.extend(batch);
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let line = log_line(epoch, "train", train_loss, &probs, &seen);
        on_log(&line);
        log.push(line);

        let score;
        let mut val_auc = None;
        if val_cases.is_empty() {
            score = (f64::NEG_INFINITY, -train_loss);
        } else {
            let (val_loss, val_probs) = evaluate_loss(model, &trainer.store, val_cases, &loss)?;
            let line = log_line(epoch, "val", val_loss, &val_probs, &val_refs);
            on_log(&line);
            log.push(line);
            let truth: Vec<bool> = val_cases.iter().map(|c| c.case_label.is_malignant()).collect();
            val_auc = auc(&val_probs, &truth).ok();
            score = (val_auc.unwrap_or(f64::NEG_INFINITY), -val_loss);
        }
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best_val_auc = val_auc;
            best = trainer.store.clone();
            best.zero_grad();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_auc,
        epochs_run,
        log,
        pos_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn heads(tape: &mut Tape, v: f64) -> CaseHeads {
        let y = tape.constant(Tensor::scalar(v));
        CaseHeads {
            y_topt: y,
            y_local: y,
            y_fusion: y,
        }
    }

    #[test]
    fn half_heads_cost_three_ln2() {
        let mut tape = Tape::new();
        let h = heads(&mut tape, 0.5);
        let cfg = LossConfig {
            beta: 0.0,
            pos_weight: 1.0,
        };
        let l = case_loss(&mut tape, Label::Malignant, &h, &[], &cfg).unwrap();
        assert!((tape.value(l).item() - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_heads_cost_clamp_level() {
        let mut tape = Tape::new();
        let h = heads(&mut tape, 1.0);
        let cfg = LossConfig {
            beta: 0.0,
            pos_weight: 1.0,
        };
        let l = case_loss(&mut tape, Label::Malignant, &h, &[], &cfg).unwrap();
        assert!(tape.value(l).item() < 3.1e-7);
    }

    #[test]
    fn saliency_l1_term() {
        let mut tape = Tape::new();
        let h = heads(&mut tape, 0.5);
        let s = tape.constant(Tensor::filled(&[1, 2, 2], 0.5));
        let cfg = LossConfig {
            beta: 1.0,
            pos_weight: 1.0,
        };
        let l = case_loss(&mut tape, Label::Benign, &h, &[s], &cfg).unwrap();
        assert!((tape.value(l).item() - (3.0 * 2f64.ln() + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_head_is_named() {
        let mut tape = Tape::new();
        let mut h = heads(&mut tape, 0.5);
        h.y_local = tape.constant(Tensor::scalar(f64::NAN));
        let err = case_loss(&mut tape, Label::Benign, &h, &[], &LossConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { head: "local" }));
    }

    #[test]
    fn pos_weight_from_split() {
        use crate::casedata::{Grid, ImageRecord, Side, View};
        let mk = |i: usize| {
            let label = Label::from_bool(i < 30);
            let img = ImageRecord {
                side: Side::L,
                view: View::CC,
                pixels: Grid::zeros(1, 1),
                image_label: None,
                roi_boxes: vec![],
                source_path: String::new(),
            };
            CaseRecord::new(format!("c{i}"), vec![img], label).unwrap()
        };
        let cases: Vec<CaseRecord> = (0..120).map(mk).collect();
        assert_eq!(auto_pos_weight(&cases), 3.0);
    }
}
