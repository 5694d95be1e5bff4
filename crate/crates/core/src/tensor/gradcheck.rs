//! Central-difference verification of reverse-mode gradients.

use super::{ParamStore, Result, Tape, Tensor, TensorError, Var};

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn finite(v: f64, index: usize, context: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite {
            index,
            value: v,
            context: context.to_string(),
        })
    }
}

fn eval_scalar(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Largest relative disagreement between the tape gradient of scalar `f` at
/// `x` and its central-difference estimate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: "eps must be positive".into(),
        });
    }
    for (i, &v) in x.data().iter().enumerate() {
        finite(v, i, "input")?;
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    eval_scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.leaf(leaf).unwrap_or(&zeros);

    let probe = |shift: f64, i: usize| -> Result<f64> {
        let mut shifted = x.clone();
        shifted.data_mut()[i] += shift;
        let mut tape = Tape::new();
        let leaf = tape.leaf(shifted, false);
        let out = f(&mut tape, leaf)?;
        finite(eval_scalar(&tape, out)?, i, "function value")
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let numeric = (probe(eps, i)? - probe(-eps, i)?) / (2.0 * eps);
        let a = finite(analytic.data()[i], i, "analytic gradient")?;
        worst = worst.max(rel_error(a, numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Checks the gradient of `f` with respect to every scalar of every
/// parameter in `store`. `f` must read parameters through [`Tape::param`].
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    eval_scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    for (id, p) in store.iter() {
        for i in 0..p.value.numel() {
            let base = p.value.data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                work.get_mut(id).value.data_mut()[i] = v;
                let mut tape = Tape::new();
                let out = f(&work, &mut tape)?;
                let ctx = format!("{}[{i}]", p.name);
                finite(eval_scalar(&tape, out)?, i, &ctx)
            };
            let numeric = (eval_at(base + eps)? - eval_at(base - eps)?) / (2.0 * eps);
            work.get_mut(id).value.data_mut()[i] = base;
            let analytic = grads.param(id).map_or(0.0, |g| g[i]);
            let analytic = finite(analytic, i, &format!("gradient of {}", p.name))?;
            let err = rel_error(analytic, numeric);
            report.entries += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((p.name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq, None)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::vector(vec![0.0, 1.0]);
        let res = grad_check(
            |t, x| {
                let l = t.log(x)?;
                t.sum(l, None)
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(TensorError::NonFinite { .. })));
    }
}
