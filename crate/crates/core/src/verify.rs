//! Finite-difference verification suite: one check per differentiable op
//! kind and one per end-to-end training path on a tiny model.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::casedata::{Grid, ImageRecord, Label, Side, View};
use crate::casedata::CaseRecord;
use crate::featurenet::{FeatureConfig, NetConfig};
use crate::milpool::PoolingSpec;
use crate::casedata::Rect;
use crate::model::{CaseHeads, CaseModel, ModelConfig};
use crate::tensor::{grad_check, Bound, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};
use crate::training::{case_loss, LossConfig, TrainError};

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;
const BIAS_JITTER: f64 = 0.3;
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Op,
    Path,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub kind: CheckKind,
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub lines: Vec<CheckLine>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(CheckLine::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let kind = match l.kind {
                CheckKind::Op => "op",
                CheckKind::Path => "path",
            };
            let status = if l.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{kind} {} max_rel_error={:.3e} {status}", l.name, l.max_rel_error);
        }
        let _ = writeln!(
            s,
            "overall max_rel_error={:.3e} tolerance={TOLERANCE:.0e} {}",
            self.max_rel_error(),
            if self.passed() { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// Deliberately wrong backward rule for one op kind, scaled by `factor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradFault {
    pub op: &'static str,
    pub factor: f64,
}

fn arm(tape: &mut Tape, fault: Option<GradFault>) {
    if let Some(f) = fault {
        tape.inject_grad_fault(f.op, f.factor);
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values at least `gap` apart, shuffled, and at least `gap/2` away from
/// zero; keeps kinks and ties out of the difference stencil.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).expect("shape")
}

/// Scalarizes `y` with fixed random weights so every output entry matters.
fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p, None)
}

type Unary = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn check_unary(x: &Tensor, f: Unary, fault: Option<GradFault>) -> Result<f64> {
    grad_check(
        |t, v| {
            arm(t, fault);
            let y = f(t, v)?;
            contract(t, y, 99)
        },
        x,
        EPS,
    )
}

/// Checks both operands of a binary op, holding the other constant.
fn check_binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(&mut Tape, Var, Var) -> Result<Var> + Copy,
    fault: Option<GradFault>,
) -> Result<f64> {
    let ea = grad_check(
        |t, v| {
            arm(t, fault);
            let c = t.constant(b.clone());
            let y = f(t, v, c)?;
            contract(t, y, 7)
        },
        a,
        EPS,
    )?;
    let eb = grad_check(
        |t, v| {
            arm(t, fault);
            let c = t.constant(a.clone());
            let y = f(t, c, v)?;
            contract(t, y, 7)
        },
        b,
        EPS,
    )?;
    Ok(ea.max(eb))
}

/// Worst error of one op kind over `trials` random inputs.
pub fn check_op(name: &str, trials: usize, seed: u64, fault: Option<GradFault>) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(trial as u64));
        let e = match name {
            "matmul" => {
                let a = random(&mut rng, &[3, 4], -1.0, 1.0);
                let b = random(&mut rng, &[4, 2], -1.0, 1.0);
                check_binary(&a, &b, |t, x, y| t.matmul(x, y), fault)?
            }
            "conv2d" => {
                let x = random(&mut rng, &[2, 5, 6], -1.0, 1.0);
                let w = random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
                let stride = 1 + trial % 2;
                check_binary(&x, &w, move |t, a, b| t.conv2d(a, b, stride, 1), fault)?
            }
            "relu" => check_unary(&spread(&mut rng, &[3, 4], 0.1), Box::new(|t, v| t.relu(v)), fault)?,
            "tanh" => check_unary(&random(&mut rng, &[3, 4], -2.0, 2.0), Box::new(|t, v| t.tanh(v)), fault)?,
            "sigmoid" => {
                check_unary(&random(&mut rng, &[3, 4], -3.0, 3.0), Box::new(|t, v| t.sigmoid(v)), fault)?
            }
            "softmax" => {
                let axis = trial % 2;
                check_unary(
                    &random(&mut rng, &[3, 4], -2.0, 2.0),
                    Box::new(move |t, v| t.softmax(v, axis)),
                    fault,
                )?
            }
            "exp" => check_unary(&random(&mut rng, &[3, 4], -2.0, 2.0), Box::new(|t, v| t.exp(v)), fault)?,
            "log" => check_unary(&random(&mut rng, &[3, 4], 0.2, 3.0), Box::new(|t, v| t.log(v)), fault)?,
            "abs" => check_unary(&spread(&mut rng, &[3, 4], 0.1), Box::new(|t, v| t.abs(v)), fault)?,
            "add" | "sub" | "mul" => {
                let a = random(&mut rng, &[3, 4], -1.0, 1.0);
                // alternate plain and broadcast operands
                let b_shape: &[usize] = if trial % 2 == 0 { &[3, 4] } else { &[1, 4] };
                let b = random(&mut rng, b_shape, -1.0, 1.0);
                match name {
                    "add" => check_binary(&a, &b, |t, x, y| t.add(x, y), fault)?,
                    "sub" => check_binary(&a, &b, |t, x, y| t.sub(x, y), fault)?,
                    _ => check_binary(&a, &b, |t, x, y| t.mul(x, y), fault)?,
                }
            }
            "scale" => {
                let c = rng.gen_range(-2.0..2.0);
                check_unary(&random(&mut rng, &[3, 4], -1.0, 1.0), Box::new(move |t, v| t.scale(v, c)), fault)?
            }
            "clamp" => {
                // entries sit either well inside or well outside [-0.5, 0.5]
                let x = spread(&mut rng, &[3, 4], 0.17);
                check_unary(&x, Box::new(|t, v| t.clamp(v, -0.5, 0.5)), fault)?
            }
            "sum" | "mean" | "max" => {
                let axis = [None, Some(0), Some(1)][trial % 3];
                let x = spread(&mut rng, &[3, 4], 0.1);
                match name {
                    "sum" => check_unary(&x, Box::new(move |t, v| t.sum(v, axis)), fault)?,
                    "mean" => check_unary(&x, Box::new(move |t, v| t.mean(v, axis)), fault)?,
                    _ => check_unary(&x, Box::new(move |t, v| t.max(v, axis)), fault)?,
                }
            }
            "topk" => {
                let k = 1 + trial % 4;
                check_unary(&spread(&mut rng, &[2, 6], 0.1), Box::new(move |t, v| t.topk(v, k)), fault)?
            }
            "concat" => {
                let axis = trial % 2;
                let a = random(&mut rng, &[2, 3], -1.0, 1.0);
                let b_shape: &[usize] = if axis == 0 { &[4, 3] } else { &[2, 5] };
                let b = random(&mut rng, b_shape, -1.0, 1.0);
                check_binary(&a, &b, move |t, x, y| t.concat(&[x, y], axis), fault)?
            }
            "slice" => {
                let axis = trial % 2;
                check_unary(
                    &random(&mut rng, &[4, 5], -1.0, 1.0),
                    Box::new(move |t, v| t.slice(v, axis, 1, 2)),
                    fault,
                )?
            }
            "reshape" => check_unary(
                &random(&mut rng, &[3, 4], -1.0, 1.0),
                Box::new(|t, v| t.reshape(v, &[2, 6])),
                fault,
            )?,
            "one_minus" => check_unary(
                &random(&mut rng, &[3, 4], -1.0, 1.0),
                Box::new(|t, v| t.one_minus(v)),
                fault,
            )?,
            other => {
                return Err(crate::tensor::TensorError::Invalid {
                    op: "check_op",
                    msg: format!("unknown op kind `{other}`"),
                })
            }
        };
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Every differentiable op kind recorded by the tape.
pub const OP_KINDS: [&str; 21] = [
    "matmul", "conv2d", "relu", "tanh", "sigmoid", "softmax", "exp", "log", "abs", "add", "sub", "mul", "scale",
    "clamp", "sum", "mean", "max", "topk", "concat", "slice", "reshape",
];

/// Small model used by the end-to-end checks.
pub fn tiny_model_config(spec: PoolingSpec) -> ModelConfig {
    ModelConfig {
        features: FeatureConfig {
            image_height: 16,
            image_width: 12,
            global: NetConfig::new(vec![3, 4], 4),
            local: NetConfig::new(vec![3, 4], 5),
            k: 2,
            patch_height: 8,
            patch_width: 8,
            attention_hidden: 6,
            t_fraction: 0.25,
            ..FeatureConfig::default()
        },
        spec,
    }
}

/// Two left and two right images: steep intensity ramps in random
/// directions plus a little texture, so corner patches differ clearly.
pub fn tiny_case(seed: u64, label: Label) -> CaseRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let views = [(Side::L, View::CC), (Side::L, View::MLO), (Side::R, View::CC), (Side::R, View::MLO)];
    for (side, view) in views {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let (dy, dx) = (angle.sin(), angle.cos());
        let noise: Vec<f64> = (0..16 * 12).map(|_| rng.gen_range(0.0..0.1)).collect();
        let pixels = Grid::from_fn(16, 12, |y, x| {
            let t = (dy * (y as f64 - 7.5) / 7.5 + dx * (x as f64 - 5.5) / 5.5) / 2.0 + 0.5;
            (0.85 * t.clamp(0.0, 1.0) + noise[y * 12 + x]).min(1.0)
        });
        images.push(ImageRecord {
            side,
            view,
            pixels,
            image_label: None,
            roi_boxes: vec![],
            source_path: String::new(),
        });
    }
    CaseRecord::new(format!("tiny{seed}"), images, label).expect("valid case")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossPart {
    Full,
    Head(usize),
    SaliencyOnly,
}

fn path_loss(
    model: &CaseModel,
    case: &CaseRecord,
    frozen: &[Vec<Rect>],
    part: LossPart,
    tape: &mut Tape,
    p: &Bound,
) -> Result<Var> {
    let cfg = LossConfig {
        beta: 0.05,
        pos_weight: 1.7,
    };
    let out = model.forward(tape, p, case, Some(frozen))?;
    let sal: Vec<Var> = out.bundles.iter().map(|b| b.saliency_var).collect();
    let heads = out.heads;
    let loss = match part {
        LossPart::Full => case_loss(tape, case.case_label, &heads, &sal, &cfg),
        LossPart::Head(i) => {
            let h = heads.all()[i];
            let single = CaseHeads {
                y_topt: h,
                y_local: h,
                y_fusion: h,
            };
            let c = LossConfig { beta: 0.0, ..cfg };
            case_loss(tape, case.case_label, &single, &[], &c)
        }
        LossPart::SaliencyOnly => {
            let mut total = None;
            for &s in &sal {
                let a = tape.abs(s)?;
                let v = tape.sum(a, None)?;
                total = Some(match total {
                    Some(t) => tape.add(t, v)?,
                    None => v,
                });
            }
            return Ok(total.expect("at least one image"));
        }
    };
    loss.map_err(|e| match e {
        TrainError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "case_loss",
            msg: other.to_string(),
        },
    })
}

fn unit(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| v.into_iter().map(|x| x / n).collect())
}

/// Gradient check of one training path on the tiny model.
///
/// Per-entry central differences cannot resolve parameter gradients much
/// below `ulp(loss) / (2 eps)`, so the check runs over directional
/// coordinates instead: for every parameter tensor, its unit analytic
/// gradient and a randomly reweighted copy of it (a random direction when
/// the analytic gradient is zero). The loss is recorded as a function of
/// those coordinates and checked entrywise.
pub fn path_check(
    spec: PoolingSpec,
    label: Label,
    part: LossPart,
    seed: u64,
    fault: Option<GradFault>,
) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CaseModel::new(&mut store, &mut rng, tiny_model_config(spec))?;
    let case = tiny_case(seed + 1, label);
    let frozen = spread_windows(&model, case.images.len());
    // zero-initialized biases put relu inputs exactly on the kink wherever a
    // patch is all padding, and dead units flatten the patch embeddings;
    // small positive biases are redrawn until every non-smooth op sits at
    // least KINK_MARGIN from its kink
    let biases: Vec<ParamId> = store.ids().filter(|&id| store.get(id).name.ends_with("bias")).collect();
    let mut attempt = 0;
    let grads = loop {
        for &id in &biases {
            store
                .get_mut(id)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(0.05..BIAS_JITTER));
        }
        let mut tape = Tape::new();
        arm(&mut tape, fault);
        let p = tape.bind(&store);
        let loss = path_loss(&model, &case, &frozen, part, &mut tape, &p)?;
        attempt += 1;
        if tape.kink_margin() >= KINK_MARGIN || attempt == 50 {
            break tape.backward(loss)?;
        }
    };

    let mut dirs: Vec<(ParamId, Tensor)> = Vec::new();
    for (id, param) in store.iter() {
        let shape = param.value.shape().to_vec();
        let n = param.value.numel();
        match grads.param(id).filter(|g| g.iter().any(|&v| v != 0.0)) {
            Some(g) => {
                // a random direction can land nearly orthogonal to a small
                // gradient; a randomly reweighted gradient cannot
                let w: Vec<f64> = g.iter().map(|&v| v * rng.gen_range(0.5..1.5)).collect();
                for d in [g.to_vec(), w] {
                    dirs.push((id, Tensor::new(shape.clone(), unit(d).expect("nonzero"))?));
                }
            }
            None => {
                let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if let Some(r) = unit(r) {
                    dirs.push((id, Tensor::new(shape, r)?));
                }
            }
        }
    }
    let x0 = Tensor::zeros(&[dirs.len()]);
    grad_check(
        |tape, x| {
            arm(tape, fault);
            let mut vars = Vec::with_capacity(store.len());
            for (id, param) in store.iter() {
                let mut v = tape.constant(param.value.clone());
                for (k, (_, d)) in dirs.iter().enumerate().filter(|(_, (pid, _))| *pid == id) {
                    let xk = tape.slice(x, 0, k, 1)?;
                    let xk = tape.reshape(xk, &vec![1; d.rank()])?;
                    let dk = tape.constant(d.clone());
                    let step = tape.mul(xk, dk)?;
                    v = tape.add(v, step)?;
                }
                vars.push(v);
            }
            let p = Bound::from_vars(vars);
            path_loss(&model, &case, &frozen, part, tape, &p)
        },
        &x0,
        EPS,
    )
}

/// Frozen windows in opposite saliency corners: retrieval is a discrete
/// choice, and distant patches keep the patch-attention gradients well
/// above finite-difference roundoff.
fn spread_windows(model: &CaseModel, images: usize) -> Vec<Vec<Rect>> {
    let f = &model.cfg.features;
    let (sh, sw) = f.saliency_extents().expect("validated config");
    let (wh, ww) = f.window();
    let corners = [(0, 0), (sh - wh, sw - ww), (0, sw - ww), (sh - wh, 0)];
    let windows: Vec<Rect> = (0..f.k)
        .map(|j| {
            let (y, x) = corners[j % corners.len()];
            Rect::new(x, y, x + ww, y + wh)
        })
        .collect();
    vec![windows; images]
}

/// Runs every op-kind check over `trials` inputs and every end-to-end path.
pub fn run_suite(trials: usize, fault: Option<GradFault>) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    for (i, op) in OP_KINDS.iter().chain(["one_minus"].iter()).enumerate() {
        report.lines.push(CheckLine {
            kind: CheckKind::Op,
            name: op.to_string(),
            max_rel_error: check_op(op, trials, 31 + i as u64, fault)?,
        });
    }
    for spec in PoolingSpec::ALL {
        report.lines.push(CheckLine {
            kind: CheckKind::Path,
            name: format!("spec:{spec}"),
            max_rel_error: path_check(spec, Label::Malignant, LossPart::Full, 5, fault)?,
        });
    }
    let side: PoolingSpec = "es-att-side".parse().expect("valid spec");
    for (i, head) in ["topt", "local", "fusion"].iter().enumerate() {
        for label in [Label::Malignant, Label::Benign] {
            report.lines.push(CheckLine {
                kind: CheckKind::Path,
                name: format!("head:{head}:{}", if label.is_malignant() { "malignant" } else { "benign" }),
                max_rel_error: path_check(side, label, LossPart::Head(i), 11, fault)?,
            });
        }
    }
    report.lines.push(CheckLine {
        kind: CheckKind::Path,
        name: "saliency_l1".into(),
        max_rel_error: path_check(side, Label::Benign, LossPart::SaliencyOnly, 13, fault)?,
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_listed() {
        for op in OP_KINDS {
            check_op(op, 1, 0, None).unwrap();
        }
        assert!(check_op("nope", 1, 0, None).is_err());
    }

    #[test]
    fn fault_is_detected() {
        let ok = check_op("tanh", 2, 1, None).unwrap();
        let bad = check_op("tanh", 2, 1, Some(GradFault { op: "tanh", factor: 1.01 })).unwrap();
        assert!(ok < TOLERANCE);
        assert!(bad > TOLERANCE);
    }
}
