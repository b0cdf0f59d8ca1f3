//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn eval(f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g
        .value(out)
        .item()
        .ok_or_else(|| Error::Contract(format!("checked function returned shape {:?}", g.shape(out))))?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("checked function evaluated to {v}")));
    }
    Ok(v)
}

/// Max relative error of the analytic gradient of a scalar function of
/// several tensors, over every coordinate of every input.
///
/// The error per coordinate is `|analytic − central| / max(1, |analytic|)`.
pub fn finite_diff_check_many(
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64> {
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item();
    match base {
        Some(v) if !v.is_finite() => return Err(Error::Numeric(format!("checked function evaluated to {v}"))),
        None => return Err(Error::Contract("checked function must return a scalar".into())),
        _ => {}
    }
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let zeros;
        let analytic = match grads.get(*var) {
            Some(t) => t,
            None => {
                zeros = Tensor::zeros(inputs[slot].shape().to_vec());
                &zeros
            }
        };
        for i in 0..inputs[slot].numel() {
            let x0 = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = x0 + eps;
            let plus = eval(&f, &probe)?;
            probe[slot].data_mut()[i] = x0 - eps;
            let minus = eval(&f, &probe)?;
            probe[slot].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check(f: impl Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor, eps: f64) -> Result<f64> {
    finite_diff_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps)
}
