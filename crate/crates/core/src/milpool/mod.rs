//! Image-level multi-instance pooling.
//!
//! A case is a bag of images. Instance-space (IS) pooling aggregates
//! per-image probabilities; embedded-space (ES) pooling aggregates per-image
//! feature vectors and classifies the pooled vector. Operators are mean,
//! max, attention, gated attention and the two-stage side-wise attention
//! (views within a breast side, then sides).

pub mod attention;

pub use attention::AttentionBlock;

use std::fmt;
use std::str::FromStr;

use crate::casedata::Side;
use crate::tensor::{Bound, Result, Tape, Tensor, TensorError, Var};

use attention::{stack_rows, weighted_sum};

pub const IMAGE_ATTENTION: &str = "image_attention";
pub const VIEW_ATTENTION: &str = "view_attention";
pub const SIDE_ATTENTION: &str = "side_attention";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Paradigm {
    Instance,
    Embedded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operator {
    Mean,
    Max,
    Att,
    GatedAtt,
    SideAtt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolingSpec {
    pub paradigm: Paradigm,
    pub operator: Operator,
}

impl PoolingSpec {
    pub const ALL: [PoolingSpec; 10] = [
        PoolingSpec::new(Paradigm::Instance, Operator::Mean),
        PoolingSpec::new(Paradigm::Instance, Operator::Max),
        PoolingSpec::new(Paradigm::Instance, Operator::Att),
        PoolingSpec::new(Paradigm::Instance, Operator::GatedAtt),
        PoolingSpec::new(Paradigm::Instance, Operator::SideAtt),
        PoolingSpec::new(Paradigm::Embedded, Operator::Mean),
        PoolingSpec::new(Paradigm::Embedded, Operator::Max),
        PoolingSpec::new(Paradigm::Embedded, Operator::Att),
        PoolingSpec::new(Paradigm::Embedded, Operator::GatedAtt),
        PoolingSpec::new(Paradigm::Embedded, Operator::SideAtt),
    ];

    pub const fn new(paradigm: Paradigm, operator: Operator) -> Self {
        PoolingSpec { paradigm, operator }
    }

    pub fn valid_strings() -> String {
        PoolingSpec::ALL.map(|s| s.to_string()).join(" | ")
    }

    pub fn is_attention(self) -> bool {
        matches!(self.operator, Operator::Att | Operator::GatedAtt)
    }
}

impl fmt::Display for PoolingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.paradigm {
            Paradigm::Instance => "is",
            Paradigm::Embedded => "es",
        };
        let o = match self.operator {
            Operator::Mean => "mean",
            Operator::Max => "max",
            Operator::Att => "att",
            Operator::GatedAtt => "gatt",
            Operator::SideAtt => "att-side",
        };
        write!(f, "{p}-{o}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecError(pub String);

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "invalid pooling spec `{}`; expected one of {}",
            self.0,
            PoolingSpec::valid_strings()
        )
    }
}

impl std::error::Error for SpecError {}

impl FromStr for PoolingSpec {
    type Err = SpecError;

    fn from_str(s: &str) -> std::result::Result<Self, SpecError> {
        PoolingSpec::ALL
            .into_iter()
            .find(|spec| spec.to_string() == s)
            .ok_or_else(|| SpecError(s.to_string()))
    }
}

fn empty_bag(op: &'static str) -> TensorError {
    TensorError::Invalid {
        op,
        msg: "empty bag".into(),
    }
}

/// Attention weights `[M, 1]` over `embeddings` (each `[d]`).
pub fn attention_weights(
    tape: &mut Tape,
    p: &Bound,
    embeddings: &[Var],
    block: &AttentionBlock,
) -> Result<Var> {
    if embeddings.is_empty() {
        return Err(empty_bag("attention_weights"));
    }
    let h = stack_rows(tape, embeddings)?;
    block.weights(tape, p, h)
}

/// Instance-space pooling of scalar probabilities. `weights` (`[M, 1]`) is
/// required for the attention operators.
pub fn pool_is(tape: &mut Tape, probs: &[Var], operator: Operator, weights: Option<Var>) -> Result<Var> {
    if probs.is_empty() {
        return Err(empty_bag("pool_is"));
    }
    let col = stack_rows(tape, probs)?;
    match (operator, weights) {
        (Operator::Mean, _) => tape.mean(col, None),
        (Operator::Max, _) => tape.max(col, None),
        (_, Some(a)) => {
            let prod = tape.mul(col, a)?;
            tape.sum(prod, None)
        }
        (_, None) => Err(TensorError::Invalid {
            op: "pool_is",
            msg: "attention pooling needs weights".into(),
        }),
    }
}

/// Embedded-space pooling of `[d]` embeddings into one `[d]` vector.
pub fn pool_es(tape: &mut Tape, embeddings: &[Var], operator: Operator, weights: Option<Var>) -> Result<Var> {
    if embeddings.is_empty() {
        return Err(empty_bag("pool_es"));
    }
    let h = stack_rows(tape, embeddings)?;
    match (operator, weights) {
        (Operator::Mean, _) => tape.mean(h, Some(0)),
        (Operator::Max, _) => tape.max(h, Some(0)),
        (_, Some(a)) => weighted_sum(tape, a, h),
        (_, None) => Err(TensorError::Invalid {
            op: "pool_es",
            msg: "attention pooling needs weights".into(),
        }),
    }
}

/// View-level and side-level attention blocks for one feature type.
#[derive(Debug, Clone, PartialEq)]
pub struct SideWiseBlock {
    pub view: AttentionBlock,
    pub side: AttentionBlock,
}

#[derive(Debug, Clone)]
pub struct SidePooled {
    /// Case embedding `[d]`.
    pub embedding: Var,
    /// Pooled probability when per-image values were supplied.
    pub value: Option<Var>,
    /// Per-image product of side and view weights, in input order.
    pub effective: Vec<f64>,
    /// Side weights for the present sides, L before R.
    pub side_weights: Vec<(Side, f64)>,
}

/// Two-stage pooling: views within each present side, then sides.
/// `values`, when given, are pooled with the same weights (IS variant).
pub fn sidewise_pool(
    tape: &mut Tape,
    p: &Bound,
    block: &SideWiseBlock,
    sides: &[Side],
    embeddings: &[Var],
    values: Option<&[Var]>,
) -> Result<SidePooled> {
    if embeddings.is_empty() || sides.len() != embeddings.len() {
        return Err(empty_bag("sidewise_pool"));
    }
    let mut side_h = Vec::new();
    let mut side_v = Vec::new();
    let mut members: Vec<(Side, Vec<usize>, Vec<f64>)> = Vec::new();
    for side in [Side::L, Side::R] {
        let idx: Vec<usize> = (0..sides.len()).filter(|&i| sides[i] == side).collect();
        if idx.is_empty() {
            continue;
        }
        let rows: Vec<Var> = idx.iter().map(|&i| embeddings[i]).collect();
        let h = stack_rows(tape, &rows)?;
        let a = block.view.weights(tape, p, h)?;
        side_h.push(weighted_sum(tape, a, h)?);
        if let Some(vals) = values {
            let col: Vec<Var> = idx.iter().map(|&i| vals[i]).collect();
            side_v.push(pool_is(tape, &col, Operator::Att, Some(a))?);
        }
        members.push((side, idx, tape.value(a).data().to_vec()));
    }
    let h = stack_rows(tape, &side_h)?;
    let a = block.side.weights(tape, p, h)?;
    let embedding = weighted_sum(tape, a, h)?;
    let value = match values {
        Some(_) => Some(pool_is(tape, &side_v, Operator::Att, Some(a))?),
        None => None,
    };
    let aw = tape.value(a).data().to_vec();
    let mut effective = vec![0.0; sides.len()];
    let mut side_weights = Vec::new();
    for ((side, idx, view_w), &sw) in members.iter().zip(&aw) {
        side_weights.push((*side, sw));
        for (&i, &vw) in idx.iter().zip(view_w) {
            effective[i] = sw * vw;
        }
    }
    Ok(SidePooled {
        embedding,
        value,
        effective,
        side_weights,
    })
}

/// Scalar tensor helper.
pub fn scalar(tape: &mut Tape, v: f64) -> Var {
    tape.constant(Tensor::scalar(v))
}
