//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradient check needs a scalar output, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Max coordinatewise relative error between the reverse-mode gradient of
/// `f` at `point` and `(f(x+h) − f(x−h)) / 2h`, using the denominator
/// `max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let out = f(&mut g, x)?;
    scalar_output(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let x = g.leaf(p);
        let out = f(&mut g, x)?;
        scalar_output(&g, out)
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Gradient check over every scalar of a parameter store. `f` receives the
/// bound parameters and must return a scalar loss.
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    grad_check(
        |g, flat| {
            let bound = store.bind_flat(g, flat)?;
            f(g, &bound)
        },
        &store.flatten(),
        h,
    )
}
