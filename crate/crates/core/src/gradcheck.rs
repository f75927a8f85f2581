//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compare the reverse-mode gradient of a scalar function against central
/// differences and return the worst per-coordinate relative error
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// `f` builds the function on a fresh graph from a leaf holding `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("step", "must be positive"));
    }
    let analytic = analytic_grad(&f, x)?;
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[k] = orig - step;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[k];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// [`grad_check`] over several input tensors at once; the worst error across all of them.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("step", "must be positive"));
    }
    let build = |g: &mut Graph, inputs: &[Tensor], rg: bool| -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), rg)).collect();
        let out = f(g, &vars)?;
        Ok((vars, out))
    };
    let value = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let (_, out) = build(&mut g, inputs, false)?;
        scalar_value(&g, out)
    };

    let mut g = Graph::new();
    let (vars, out) = build(&mut g, xs, true)?;
    scalar_value(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(v, x)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut probe = xs.to_vec();
    let mut worst: f64 = 0.0;
    for (t, grad) in analytic.iter().enumerate() {
        for k in 0..xs[t].numel() {
            let orig = probe[t].data()[k];
            probe[t].data_mut()[k] = orig + step;
            let plus = value(&probe)?;
            probe[t].data_mut()[k] = orig - step;
            let minus = value(&probe)?;
            probe[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[k];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12));
        }
    }
    Ok(worst)
}

fn scalar_value(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    let value = v.item().ok_or_else(|| Error::NonScalarLoss {
        shape: v.shape().to_vec(),
    })?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value}")));
    }
    Ok(value)
}

/// Scalar value of `f` at `x`.
pub fn evaluate<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.constant(x.clone());
    let out = f(&mut g, leaf)?;
    scalar_value(&g, out)
}

fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let out = f(&mut g, leaf)?;
    scalar_value(&g, out)?;
    g.backward(out)?;
    Ok(g.grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape())))
}
