//! Forward and vector-Jacobian kernels for every recorded op.

use super::tape::Op;
use super::{Result, Tensor, TensorError};

/// Indices recorded by selecting ops (max, topk) for the reverse pass.
pub(crate) type Saved = Option<Vec<usize>>;

fn shape_err(op: &'static str, inputs: &[&Tensor]) -> TensorError {
    TensorError::Shape {
        op,
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn arity(op: &Op, inputs: &[&Tensor]) -> Result<()> {
    let ok = match op {
        Op::MatMul | Op::Conv2d { .. } | Op::Add | Op::Sub | Op::Mul => inputs.len() == 2,
        Op::Concat { .. } => !inputs.is_empty(),
        _ => inputs.len() == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(TensorError::Invalid {
            op: op.name(),
            msg: format!("wrong number of inputs: {}", inputs.len()),
        })
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(TensorError::Invalid {
            op,
            msg: format!("axis {axis} out of range for shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Flat input offsets for every output position of a broadcast binary op.
fn broadcast_offsets(a: &[usize], b: &[usize], out: &[usize]) -> Vec<(usize, usize)> {
    let rank = out.len();
    let strides = |shape: &[usize]| {
        let mut s = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            s[d] = if shape[d] == 1 { 0 } else { acc };
            acc *= shape[d];
        }
        s
    };
    let (sa, sb) = (strides(a), strides(b));
    let numel: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut offsets = Vec::with_capacity(numel);
    for _ in 0..numel {
        offsets.push((oa, ob));
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Descending order of `values`, ties resolved to the lower index.
pub fn argtopk(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k);
    order
}

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    arity(op, inputs)?;
    let name = op.name();
    let x = inputs[0];
    let unary = |f: &dyn Fn(f64) -> f64| {
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
    };
    let out = match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(name, inputs));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; m * n];
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::new(vec![m, n], out)?
        }
        Op::Conv2d { stride, padding } => {
            let (xin, w) = (inputs[0], inputs[1]);
            if xin.rank() != 3 || w.rank() != 4 || xin.shape()[0] != w.shape()[1] {
                return Err(shape_err(name, inputs));
            }
            let (cin, h, wd) = (xin.shape()[0], xin.shape()[1], xin.shape()[2]);
            let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let (ho, wo) = match (
                conv_out(h, kh, *stride, *padding),
                conv_out(wd, kw, *stride, *padding),
            ) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(shape_err(name, inputs)),
            };
            let mut out = vec![0.0; cout * ho * wo];
            conv_loop(cin, h, wd, cout, kh, kw, ho, wo, *stride, *padding, |co, ci, ky, kx, oi, ii| {
                let wv = w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                out[oi] += wv * xin.data()[ii];
            });
            Tensor::new(vec![cout, ho, wo], out)?
        }
        Op::Relu => unary(&|v| if v > 0.0 { v } else { 0.0 })?,
        Op::Tanh => unary(&f64::tanh)?,
        Op::Sigmoid => unary(&sigmoid)?,
        Op::Exp => unary(&f64::exp)?,
        Op::Log => unary(&f64::ln)?,
        Op::Abs => unary(&f64::abs)?,
        Op::Scale(c) => unary(&|v| v * c)?,
        Op::Clamp { lo, hi } => unary(&|v| v.clamp(*lo, *hi))?,
        Op::Softmax { axis } => {
            check_axis(name, x, *axis)?;
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut out = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for l in 0..len {
                        mx = mx.max(out[at(l)]);
                    }
                    let mut total = 0.0;
                    for l in 0..len {
                        let e = (out[at(l)] - mx).exp();
                        out[at(l)] = e;
                        total += e;
                    }
                    for l in 0..len {
                        out[at(l)] /= total;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |p, q| p + q,
                Op::Sub => |p, q| p - q,
                _ => |p, q| p * q,
            };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            } else {
                let shape =
                    broadcast_shape(a.shape(), b.shape()).ok_or_else(|| shape_err(name, inputs))?;
                let data = broadcast_offsets(a.shape(), b.shape(), &shape)
                    .into_iter()
                    .map(|(ia, ib)| f(a.data()[ia], b.data()[ib]))
                    .collect();
                Tensor::new(shape, data)?
            }
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            let mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let s: f64 = x.data().iter().sum();
                    Tensor::scalar(if mean { s / x.numel() as f64 } else { s })
                }
                Some(axis) => {
                    check_axis(name, x, *axis)?;
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                out[o * inner + i] += x.data()[(o * len + l) * inner + i];
                            }
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(*axis);
                    Tensor::new(shape, out)?
                }
            }
        }
        Op::Max { axis } => {
            if x.numel() == 0 {
                return Err(TensorError::Invalid {
                    op: name,
                    msg: "max of an empty tensor".into(),
                });
            }
            match axis {
                None => {
                    let best = argtopk(x.data(), 1)[0];
                    return Ok((Tensor::scalar(x.data()[best]), Some(vec![best])));
                }
                Some(axis) => {
                    check_axis(name, x, *axis)?;
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let mut out = Vec::with_capacity(outer * inner);
                    let mut picks = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = (o * len) * inner + i;
                            for l in 1..len {
                                let at = (o * len + l) * inner + i;
                                if x.data()[at] > x.data()[best] {
                                    best = at;
                                }
                            }
                            out.push(x.data()[best]);
                            picks.push(best);
                        }
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(*axis);
                    return Ok((Tensor::new(shape, out)?, Some(picks)));
                }
            }
        }
        Op::TopK { k } => {
            if x.rank() == 0 {
                return Err(shape_err(name, inputs));
            }
            let len = *x.shape().last().unwrap();
            if *k > len || *k == 0 {
                return Err(TensorError::Invalid {
                    op: name,
                    msg: format!("k = {k} outside 1..={len} for shape {:?}", x.shape()),
                });
            }
            let rows = x.numel() / len;
            let mut out = Vec::with_capacity(rows * k);
            let mut picks = Vec::with_capacity(rows * k);
            for r in 0..rows {
                let row = &x.data()[r * len..(r + 1) * len];
                for j in argtopk(row, *k) {
                    out.push(row[j]);
                    picks.push(r * len + j);
                }
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = *k;
            return Ok((Tensor::new(shape, out)?, Some(picks)));
        }
        Op::Concat { axis } => {
            check_axis(name, x, *axis)?;
            let rank = x.rank();
            for t in inputs {
                let compatible = t.rank() == rank
                    && (0..rank).all(|d| d == *axis || t.shape()[d] == x.shape()[d]);
                if !compatible {
                    return Err(shape_err(name, inputs));
                }
            }
            let (outer, _, inner) = split_axis(x.shape(), *axis);
            let total: usize = inputs.iter().map(|t| t.shape()[*axis]).sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for t in inputs {
                    let block = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = total;
            Tensor::new(shape, out)?
        }
        Op::Slice { axis, start, len } => {
            check_axis(name, x, *axis)?;
            if start + len > x.shape()[*axis] || *len == 0 {
                return Err(TensorError::Invalid {
                    op: name,
                    msg: format!(
                        "range {start}..{} outside axis {axis} of shape {:?}",
                        start + len,
                        x.shape()
                    ),
                });
            }
            let (outer, full, inner) = split_axis(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * full + start) * inner;
                out.extend_from_slice(&x.data()[from..from + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(shape, out)?
        }
        Op::Reshape { shape } => {
            if shape.iter().product::<usize>() != x.numel() {
                return Err(TensorError::Invalid {
                    op: name,
                    msg: format!("cannot reshape {:?} into {:?}", x.shape(), shape),
                });
            }
            Tensor::new(shape.clone(), x.data().to_vec())?
        }
    };
    Ok((out, None))
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Visits every (weight, output, input) triple of a zero-padded strided
/// convolution in a fixed order.
#[allow(clippy::too_many_arguments)]
fn conv_loop(
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
    mut visit: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..kw {
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let oi = (co * ho + oy) * wo + ox;
                            let ii = (ci * h + iy) * w + ix as usize;
                            visit(co, ci, ky, kx, oi, ii);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients with respect to each input, `None` where `needs[i]` is false.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    saved: &Saved,
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let x = inputs[0];
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };
    match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs[0] {
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b.data()[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                grads[0] = Some(da);
            }
            if needs[1] {
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = a.data()[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                grads[1] = Some(db);
            }
        }
        Op::Conv2d { stride, padding } => {
            let (xin, w) = (inputs[0], inputs[1]);
            let (cin, h, wd) = (xin.shape()[0], xin.shape()[1], xin.shape()[2]);
            let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let (ho, wo) = (output.shape()[1], output.shape()[2]);
            let mut dx = needs[0].then(|| vec![0.0; xin.numel()]);
            let mut dw = needs[1].then(|| vec![0.0; w.numel()]);
            conv_loop(cin, h, wd, cout, kh, kw, ho, wo, *stride, *padding, |co, ci, ky, kx, oi, ii| {
                let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                if let Some(dx) = dx.as_mut() {
                    dx[ii] += w.data()[wi] * g[oi];
                }
                if let Some(dw) = dw.as_mut() {
                    dw[wi] += xin.data()[ii] * g[oi];
                }
            });
            grads[0] = dx;
            grads[1] = dw;
        }
        Op::Relu => {
            grads[0] = Some(elementwise(&|i| if x.data()[i] > 0.0 { g[i] } else { 0.0 }));
        }
        Op::Tanh => {
            let y = output.data();
            grads[0] = Some(elementwise(&|i| g[i] * (1.0 - y[i] * y[i])));
        }
        Op::Sigmoid => {
            let y = output.data();
            grads[0] = Some(elementwise(&|i| g[i] * y[i] * (1.0 - y[i])));
        }
        Op::Exp => {
            let y = output.data();
            grads[0] = Some(elementwise(&|i| g[i] * y[i]));
        }
        Op::Log => grads[0] = Some(elementwise(&|i| g[i] / x.data()[i])),
        Op::Abs => {
            grads[0] = Some(elementwise(&|i| {
                let v = x.data()[i];
                if v > 0.0 {
                    g[i]
                } else if v < 0.0 {
                    -g[i]
                } else {
                    0.0
                }
            }))
        }
        Op::Scale(c) => grads[0] = Some(elementwise(&|i| g[i] * c)),
        Op::Clamp { lo, hi } => {
            grads[0] = Some(elementwise(&|i| {
                let v = x.data()[i];
                if v >= *lo && v <= *hi {
                    g[i]
                } else {
                    0.0
                }
            }))
        }
        Op::Softmax { axis } => {
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let y = output.data();
            let mut dx = vec![0.0; x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        dx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            grads[0] = Some(dx);
        }
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let sign_b = if matches!(op, Op::Sub) { -1.0 } else { 1.0 };
            let is_mul = matches!(op, Op::Mul);
            let mut da = needs[0].then(|| vec![0.0; a.numel()]);
            let mut db = needs[1].then(|| vec![0.0; b.numel()]);
            let mut visit = |o: usize, ia: usize, ib: usize| {
                if let Some(da) = da.as_mut() {
                    da[ia] += if is_mul { g[o] * b.data()[ib] } else { g[o] };
                }
                if let Some(db) = db.as_mut() {
                    db[ib] += if is_mul { g[o] * a.data()[ia] } else { sign_b * g[o] };
                }
            };
            if a.shape() == b.shape() {
                (0..g.len()).for_each(|o| visit(o, o, o));
            } else {
                for (o, (ia, ib)) in broadcast_offsets(a.shape(), b.shape(), output.shape())
                    .into_iter()
                    .enumerate()
                {
                    visit(o, ia, ib);
                }
            }
            grads[0] = da;
            grads[1] = db;
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            let mean = matches!(op, Op::Mean { .. });
            let dx = match axis {
                None => {
                    let scale = if mean { 1.0 / x.numel() as f64 } else { 1.0 };
                    vec![g[0] * scale; x.numel()]
                }
                Some(axis) => {
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                    let mut dx = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                dx[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    dx
                }
            };
            grads[0] = Some(dx);
        }
        Op::Max { .. } | Op::TopK { .. } => {
            let picks = saved.as_ref().expect("selection indices recorded in forward");
            let mut dx = vec![0.0; x.numel()];
            for (o, &p) in picks.iter().enumerate() {
                dx[p] += g[o];
            }
            grads[0] = Some(dx);
        }
        Op::Concat { axis } => {
            let (outer, _, inner) = split_axis(output.shape(), *axis);
            let total = output.shape()[*axis];
            let mut offset = 0;
            for (n, t) in inputs.iter().enumerate() {
                let len = t.shape()[*axis];
                if needs[n] {
                    let mut dt = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        dt.extend_from_slice(&g[from..from + len * inner]);
                    }
                    grads[n] = Some(dt);
                }
                offset += len;
            }
        }
        Op::Slice { axis, start, len } => {
            let (outer, full, inner) = split_axis(x.shape(), *axis);
            let mut dx = vec![0.0; x.numel()];
            for o in 0..outer {
                let from = (o * full + start) * inner;
                dx[from..from + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            grads[0] = Some(dx);
        }
        Op::Reshape { .. } => grads[0] = Some(g.to_vec()),
    }
    for (n, need) in needs.iter().enumerate() {
        if !need {
            grads[n] = None;
        }
    }
    grads
}
