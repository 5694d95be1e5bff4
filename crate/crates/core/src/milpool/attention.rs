use rand::Rng;

use crate::tensor::{Bound, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// Uniform initialization in `[-limit, limit]`.
pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// (Gated) attention scorer over a list of embeddings.
///
/// Weights are stored transposed with respect to the usual column-vector
/// notation so that a bag is a row-stacked `[M, dim]` matrix:
/// `logits = tanh(H V) [* sigmoid(H U)] w`, then a softmax over the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    /// `[dim, hidden]`
    pub v: ParamId,
    /// `[dim, hidden]`, gated blocks only.
    pub u: Option<ParamId>,
    /// `[hidden, 1]`
    pub w: ParamId,
    pub dim: usize,
    pub hidden: usize,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        component: &str,
        dim: usize,
        hidden: usize,
        gated: bool,
    ) -> Result<Self> {
        let lim = (6.0 / (dim + hidden) as f64).sqrt();
        let v = store.add(&format!("{name}.V"), component, uniform(rng, &[dim, hidden], lim))?;
        let u = if gated {
            Some(store.add(&format!("{name}.U"), component, uniform(rng, &[dim, hidden], lim))?)
        } else {
            None
        };
        let wl = (6.0 / (hidden + 1) as f64).sqrt();
        let w = store.add(&format!("{name}.w"), component, uniform(rng, &[hidden, 1], wl))?;
        Ok(AttentionBlock {
            v,
            u,
            w,
            dim,
            hidden,
        })
    }

    pub fn gated(&self) -> bool {
        self.u.is_some()
    }

    /// Softmax-normalized weights `[M, 1]` for the rows of `h: [M, dim]`.
    pub fn weights(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let hv = tape.matmul(h, p.get(self.v))?;
        let mut act = tape.tanh(hv)?;
        if let Some(u) = self.u {
            let hu = tape.matmul(h, p.get(u))?;
            let gate = tape.sigmoid(hu)?;
            act = tape.mul(act, gate)?;
        }
        let logits = tape.matmul(act, p.get(self.w))?;
        tape.softmax(logits, 0)
    }
}

/// `sum_m a_m h_m` for `a: [M, 1]`, `h: [M, d]`; returns `[d]`.
pub fn weighted_sum(tape: &mut Tape, a: Var, h: Var) -> Result<Var> {
    let prod = tape.mul(h, a)?;
    tape.sum(prod, Some(0))
}

/// Row-stacks `[d]` vectors into `[M, d]`.
pub fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let mut reshaped = Vec::with_capacity(rows.len());
    for &r in rows {
        let d = tape.shape(r).iter().product::<usize>();
        reshaped.push(tape.reshape(r, &[1, d])?);
    }
    tape.concat(&reshaped, 0)
}
