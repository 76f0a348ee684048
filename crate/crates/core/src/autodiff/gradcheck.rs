use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by [`finite_diff_check`].
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub passed: bool,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval_scalar<F>(f: &F, params: &Tensor, with_grad: bool) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = if with_grad {
        g.parameter(params)
    } else {
        g.leaf(&params.clone().with_requires_grad(false))
    };
    let out = f(&mut g, p)?;
    if g.value(out).len() != 1 {
        return Err(Error::InvalidInput(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    let value = g.scalar(out);
    if !value.is_finite() {
        return Err(Error::NonFinite("finite_diff_check objective".into()));
    }
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(out)?;
    let grad = grads
        .get(p)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; params.numel()]);
    Ok((value, grad))
}

/// Compare the analytic gradient of `f` at `params` against central finite
/// differences. `f` receives a graph and the parameter node and returns a
/// scalar node. Relative error per element is
/// `|a - n| / max(1, |a|, |n|)`.
pub fn finite_diff_check<F>(f: F, params: &Tensor, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_with_step(f, params, tol, DEFAULT_STEP)
}

pub fn finite_diff_check_with_step<F>(
    f: F,
    params: &Tensor,
    tol: f64,
    step: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !params.is_finite() {
        return Err(Error::NonFinite("finite_diff_check parameters".into()));
    }
    let (_, analytic) = eval_scalar(&f, params, true)?;
    let mut numeric = vec![0.0; params.numel()];
    let mut probe = params.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + step;
        let (plus, _) = eval_scalar(&f, &probe, false)?;
        probe.data_mut()[i] = orig - step;
        let (minus, _) = eval_scalar(&f, &probe, false)?;
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = 1f64.max(a.abs()).max(n.abs());
        let rel = (a - n).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        passed: max_rel_error < tol,
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
