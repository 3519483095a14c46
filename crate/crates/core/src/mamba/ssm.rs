//! Zero-order-hold discretization and the reference sequential scan over a
//! diagonal (per-channel) state transition.
//!
//! Layout follows the channel-major convention: inputs and outputs are
//! `d_inner × 𝒯`, the transition is `d_inner × d_state`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this `|Δ·a|` the gain `(exp(Δa) − 1)/a` is evaluated by its
/// Taylor series instead of the closed form.
pub const SERIES_GUARD: f64 = 1e-5;

/// Discrete transition and input gain for one scalar mode.
///
/// Returns `(exp(Δa), (exp(Δa) − 1)/a)`; the discretized input weight is
/// `gain · b`.
#[inline]
pub fn zoh(delta: f64, a: f64) -> (f64, f64) {
    let x = delta * a;
    let abar = x.exp();
    let gain = if x.abs() < SERIES_GUARD {
        delta * (1.0 + x / 2.0 + x * x / 6.0)
    } else {
        x.exp_m1() / a
    };
    (abar, gain)
}

/// `∂gain/∂a` for the gain returned by [`zoh`]: `Δ² φ'(Δa)` with
/// `φ(x) = (eˣ − 1)/x`.
#[inline]
pub fn zoh_gain_grad_a(delta: f64, a: f64) -> f64 {
    let x = delta * a;
    let dphi = if x.abs() < 1e-3 {
        0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0
    } else {
        (x * x.exp() - x.exp_m1()) / (x * x)
    };
    delta * delta * dphi
}

/// Discretized quantities for one scan step.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmStep {
    /// `exp(Δ_k a)`, `d_inner × d_state`.
    pub a_bar: Tensor,
    /// `(exp(Δ_k a) − 1)/a · b_k`, `d_inner × d_state`.
    pub b_bar: Tensor,
    /// Output read-out, `d_state`.
    pub c: Tensor,
    /// Step sizes, `d_inner`.
    pub delta: Tensor,
}

/// Diagonal ZOH discretization of `(a, b_k)` with per-channel step `delta_k`.
pub fn discretize(a: &Tensor, b_k: &Tensor, c_k: &Tensor, delta_k: &Tensor) -> Result<SsmStep> {
    if a.ndim() != 2 {
        return Err(Error::InvalidShape(format!("transition must be a matrix, got {:?}", a.shape())));
    }
    let (di, ds) = (a.shape()[0], a.shape()[1]);
    if b_k.len() != ds || c_k.len() != ds {
        return Err(Error::shape("discretize", a.shape(), b_k.shape()));
    }
    if delta_k.len() != di {
        return Err(Error::shape("discretize", a.shape(), delta_k.shape()));
    }
    if let Some(&bad) = delta_k.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::InvalidArgument(format!("step size must be > 0, got {bad}")));
    }
    let mut a_bar = vec![0.0; di * ds];
    let mut b_bar = vec![0.0; di * ds];
    for i in 0..di {
        let dl = delta_k.data()[i];
        for j in 0..ds {
            let (ab, gain) = zoh(dl, a.data()[i * ds + j]);
            a_bar[i * ds + j] = ab;
            b_bar[i * ds + j] = gain * b_k.data()[j];
        }
    }
    Ok(SsmStep {
        a_bar: Tensor::new(vec![di, ds], a_bar)?,
        b_bar: Tensor::new(vec![di, ds], b_bar)?,
        c: c_k.reshape(&[ds])?,
        delta: delta_k.reshape(&[di])?,
    })
}

/// Reference sequential scan from `H_0 = 0`:
/// `H_k = Ã_k ⊙ H_{k−1} + B̃_k ⊙ U_k`, `Y_k = Σ_state C_k ⊙ H_k + D ⊙ U_k`.
///
/// `u` is `d_inner × 𝒯`, `d` is `d_inner`; returns `d_inner × 𝒯`.
pub fn selective_scan(steps: &[SsmStep], u: &Tensor, d: &Tensor) -> Result<Tensor> {
    if u.ndim() != 2 || u.shape()[1] != steps.len() {
        return Err(Error::InvalidShape(format!(
            "input {:?} for {} steps",
            u.shape(),
            steps.len()
        )));
    }
    let (di, len) = (u.shape()[0], u.shape()[1]);
    if d.len() != di {
        return Err(Error::shape("selective_scan", u.shape(), d.shape()));
    }
    let ds = steps.first().map(|s| s.c.len()).unwrap_or(1);
    let mut h = vec![0.0; di * ds];
    let mut y = vec![0.0; di * len];
    for (k, step) in steps.iter().enumerate() {
        if step.a_bar.shape() != [di, ds] || step.b_bar.shape() != [di, ds] || step.c.len() != ds {
            return Err(Error::shape("selective_scan step", &[di, ds], step.a_bar.shape()));
        }
        let (ab, bb, c) = (step.a_bar.data(), step.b_bar.data(), step.c.data());
        for i in 0..di {
            let ui = u.data()[i * len + k];
            let mut acc = d.data()[i] * ui;
            for j in 0..ds {
                let s = i * ds + j;
                h[s] = ab[s] * h[s] + bb[s] * ui;
                acc += c[j] * h[s];
            }
            y[i * len + k] = acc;
        }
    }
    Tensor::new(vec![di, len], y)
}

/// Discretize one sequence given row-layout projections: `delta[𝒯, Di]`,
/// `b[𝒯, Ds]`, `c[𝒯, Ds]`, and the transition `a[Di, Ds]`.
pub fn steps_from_rows(a: &Tensor, delta: &Tensor, b: &Tensor, c: &Tensor) -> Result<Vec<SsmStep>> {
    if delta.ndim() != 2 || b.ndim() != 2 || c.ndim() != 2 {
        return Err(Error::InvalidShape("row-layout projections must be matrices".into()));
    }
    let len = delta.shape()[0];
    if b.shape()[0] != len || c.shape()[0] != len {
        return Err(Error::shape("steps_from_rows", delta.shape(), b.shape()));
    }
    (0..len)
        .map(|k| {
            discretize(
                a,
                &b.slice_axis(0, k, 1)?,
                &c.slice_axis(0, k, 1)?,
                &delta.slice_axis(0, k, 1)?,
            )
        })
        .collect()
}

/// Real diagonal HiPPO-style spectrum: `A[i, j] = −(j + 1)` for every channel.
pub fn hippo_init(d_inner: usize, d_state: usize) -> Tensor {
    Tensor::from_fn(&[d_inner, d_state], |idx| -((idx % d_state) as f64 + 1.0))
}

/// `log(−A)` storage for [`hippo_init`].
pub fn hippo_log_init(d_inner: usize, d_state: usize) -> Tensor {
    hippo_init(d_inner, d_state).map(|a| (-a).ln())
}
