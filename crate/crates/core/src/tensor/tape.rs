use std::collections::BTreeMap;

use super::kernels::{self, Saved};
use super::params::{ParamId, ParamStore};
use super::{Result, Tensor, TensorError};

/// A differentiable operation together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// Input `[cin, h, w]`, weight `[cout, cin, kh, kw]`, zero padding.
    Conv2d { stride: usize, padding: usize },
    Relu,
    Tanh,
    Sigmoid,
    Softmax { axis: usize },
    Exp,
    Log,
    Abs,
    /// Elementwise, broadcasting over singleton axes of equal-rank inputs.
    Add,
    Sub,
    Mul,
    Scale(f64),
    Clamp { lo: f64, hi: f64 },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Max { axis: Option<usize> },
    /// Largest `k` values along the last axis, descending.
    TopK { k: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Clamp { .. } => "clamp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::TopK { .. } => "topk",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Parameter handles of one [`ParamStore`] recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Binding from arbitrary vars, one per parameter in id order; lets a
    /// caller feed computed values in place of the stored parameters.
    pub fn from_vars(vars: Vec<Var>) -> Bound {
        Bound(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }
}

enum Origin {
    Leaf {
        param: Option<ParamId>,
        keep_grad: bool,
    },
    Op {
        op: Op,
        inputs: Vec<Var>,
        saved: Saved,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    origin: Origin,
}

/// Linear record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(&'static str, f64)>,
}

/// Result of a reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    leaves: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient of a leaf created with `requires_grad = true`.
    pub fn leaf(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    /// Adds every parameter gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (&id, g) in &self.params {
            store.accumulate_grad(id, g);
        }
    }
}

/// Smallest gap between the `k`-th and `k+1`-th largest value over the
/// lanes along `axis` (the whole tensor when `None`).
fn lane_gap(shape: &[usize], data: &[f64], axis: Option<usize>, k: usize) -> f64 {
    let (outer, n, inner) = match axis {
        None => (1, data.len(), 1),
        Some(a) => (
            shape[..a].iter().product(),
            shape[a],
            shape[a + 1..].iter().product(),
        ),
    };
    if k >= n {
        return f64::INFINITY;
    }
    let mut gap = f64::INFINITY;
    let mut lane = Vec::with_capacity(n);
    for o in 0..outer {
        for i in 0..inner {
            lane.clear();
            lane.extend((0..n).map(|j| data[o * n * inner + j * inner + i]));
            lane.sort_by(|a, b| b.total_cmp(a));
            // exact zeros tie inside a flat relu region, which relu margins cover
            if lane[k - 1] != 0.0 || lane[k] != 0.0 {
                gap = gap.min(lane[k - 1] - lane[k]);
            }
        }
    }
    gap
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            requires_grad: false,
            origin: Origin::Leaf {
                param: None,
                keep_grad: false,
            },
        })
    }

    /// A non-parameter leaf; its gradient is kept when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            requires_grad,
            origin: Origin::Leaf {
                param: None,
                keep_grad: requires_grad,
            },
        })
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Node {
            value: store.get(id).value.clone(),
            requires_grad: true,
            origin: Origin::Leaf {
                param: Some(id),
                keep_grad: false,
            },
        })
    }

    /// Records every parameter of `store` as a leaf, in id order.
    pub fn bind(&mut self, store: &ParamStore) -> Bound {
        Bound(store.ids().map(|id| self.param(store, id)).collect())
    }

    /// Test hook: multiplies every input gradient produced by ops named
    /// `op` by `factor` during the reverse sweep.
    #[doc(hidden)]
    pub fn inject_grad_fault(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = kernels::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            requires_grad,
            origin: Origin::Op {
                op,
                inputs: inputs.to_vec(),
                saved,
            },
        }))
    }

    /// Smallest distance of any recorded non-smooth op from its kink: relu
    /// and abs inputs from zero, clamp inputs from the bounds, and the gap
    /// between the selected and the next value of max and topk.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let Origin::Op { op, inputs, .. } = &node.origin else { continue };
            let x = &self.nodes[inputs[0].0].value;
            let data = x.data();
            match op {
                Op::Relu | Op::Abs => {
                    margin = data.iter().fold(margin, |m, v| m.min(v.abs()));
                }
                Op::Clamp { lo, hi } => {
                    margin = data
                        .iter()
                        .fold(margin, |m, v| m.min((v - lo).abs()).min((v - hi).abs()));
                }
                Op::Max { axis } => margin = margin.min(lane_gap(x.shape(), data, *axis, 1)),
                Op::TopK { k } => {
                    let axis = x.rank().checked_sub(1);
                    margin = margin.min(lane_gap(x.shape(), data, axis, *k));
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut out = Gradients::default();
        if !root.requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.origin {
                Origin::Leaf { param, keep_grad } => {
                    if let Some(id) = param {
                        match out.params.get_mut(id) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => {
                                out.params.insert(*id, g);
                            }
                        }
                    } else if *keep_grad {
                        out.leaves
                            .insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                Origin::Op { op, inputs, saved } => {
                    let needs: Vec<bool> =
                        inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let values: Vec<&Tensor> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let mut input_grads = kernels::backward(op, &values, &node.value, saved, &g, &needs);
                    if let Some((name, factor)) = self.fault {
                        if name == op.name() {
                            input_grads.iter_mut().flatten().flatten().for_each(|v| *v *= factor);
                        }
                    }
                    for (var, ig) in inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        match grads[var.0].as_mut() {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => grads[var.0] = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }

    // Convenience wrappers over `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, padding }, &[x, w])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Log, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Abs, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Op::Clamp { lo, hi }, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Sum { axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[x])
    }

    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Max { axis }, &[x])
    }

    pub fn topk(&mut self, x: Var, k: usize) -> Result<Var> {
        self.apply(Op::TopK { k }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    /// `1 - x` for a tensor of any shape.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let ones = self.constant(Tensor::filled(self.shape(x), 1.0));
        self.sub(ones, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn sigmoid_of_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
        let grads = tape.backward(y).unwrap();
        assert!(close(grads.leaf(x).unwrap().item(), 0.25));
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn topk_values_descending() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.1, 0.9, 0.4, 0.7]));
        let y = tape.topk(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[0.9, 0.7]);
        assert!(tape.topk(x, 5).is_err());
    }

    #[test]
    fn bilinear_sum_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let ab = tape.mul(a, b).unwrap();
        let loss = tape.sum(ab, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.leaf(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn max_ties_route_to_first_occurrence() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, 5.0, 5.0]), true);
        let m = tape.max(x, None).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.leaf(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0]));
        let b = tape.leaf(Tensor::vector(vec![2.0]), true);
        let ab = tape.mul(a, b).unwrap();
        let loss = tape.sum(ab, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.leaf(a).is_none());
        assert_eq!(grads.leaf(b).unwrap().data(), &[1.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let loss = tape.sum(c, None).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.leaf(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.leaf(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn concat_then_slice_is_exact() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![1.0 / 3.0, 2.0 / 7.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        let a2 = tape.slice(c, 1, 0, 2).unwrap();
        let b2 = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }

    #[test]
    fn conv2d_output_extents() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 64, 48]));
        let w = tape.constant(Tensor::zeros(&[4, 1, 3, 3]));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[4, 32, 24]);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut store = ParamStore::new();
        store.register_component("c");
        let used = store.add("used", "c", Tensor::vector(vec![1.0])).unwrap();
        let unused = store.add("unused", "c", Tensor::vector(vec![1.0])).unwrap();
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let loss = tape.sum(u, None).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        assert!(store.get(unused).grad.is_none());
        assert_eq!(store.get(used).grad.as_ref().unwrap().data(), &[1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut store = ParamStore::new();
        store.register_component("c");
        let p = store.add("p", "c", Tensor::vector(vec![3.0])).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq, None).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        tape.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.as_ref().unwrap().data(), &[12.0]);
        store.zero_grad();
        assert!(store.get(p).grad.is_none());
    }
}
