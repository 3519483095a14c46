//! ST-mixer reshape and the selective state-space block.

pub mod ssm;

use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{Bound, LinearMap, NormParams, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub expand: usize,
    pub d_state: usize,
}

impl MambaConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn num_params(&self) -> usize {
        let (dh, di, ds) = (self.d_model, self.d_inner(), self.d_state);
        LinearMap::num_scalars(dh, di, true)
            + di * ds
            + 2 * LinearMap::num_scalars(di, ds, true)
            + LinearMap::num_scalars(di, di, false)
            + di
            + di
            + LinearMap::num_scalars(di, dh, true)
            + 4 * dh
    }
}

/// Fuse time and node axes: `[B, T, N, d]` → `[B, T·N, d]`, row
/// `t·N + n` holding frame `t`, node `n`.
pub fn st_mix(g: &mut Graph, z: Var) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!("expected [B, T, N, d], got {s:?}")));
    }
    g.reshape(z, &[s[0], s[1] * s[2], s[3]])
}

/// Inverse of [`st_mix`].
pub fn st_unmix(g: &mut Graph, x: Var, frames: usize, nodes: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != frames * nodes {
        return Err(Error::InvalidShape(format!(
            "cannot unmix {s:?} into {frames} frames × {nodes} nodes"
        )));
    }
    g.reshape(x, &[s[0], frames, nodes, s[2]])
}

/// Selective SSM projections, row layout `[G, 𝒯, ·]`.
pub struct Projections {
    pub u: Var,
    pub b: Var,
    pub c: Var,
    pub delta: Var,
}

#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub in_proj: LinearMap,
    /// `log(−A)`, `d_inner × d_state`.
    pub a_log: ParamId,
    pub proj_b: LinearMap,
    pub proj_c: LinearMap,
    pub proj_delta: LinearMap,
    pub delta_bias: ParamId,
    pub d_skip: ParamId,
    pub out_proj: LinearMap,
    pub norm_in: NormParams,
    pub norm_out: NormParams,
    pub config: MambaConfig,
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl MambaBlock {
    pub fn new(store: &mut ParamStore, name: &str, config: &MambaConfig) -> Result<Self> {
        if config.d_model == 0 || config.expand == 0 || config.d_state == 0 {
            return Err(Error::Config("mamba widths must be positive".into()));
        }
        let (dh, di, ds) = (config.d_model, config.d_inner(), config.d_state);
        let norm_in = NormParams::new(store, &format!("{name}.norm_in"), dh);
        let in_proj = LinearMap::new(store, &format!("{name}.in_proj"), dh, di, true);
        let a_log = store.add(format!("{name}.a_log"), ssm::hippo_log_init(di, ds));
        let proj_b = LinearMap::new(store, &format!("{name}.proj_b"), di, ds, true);
        let proj_c = LinearMap::new(store, &format!("{name}.proj_c"), di, ds, true);
        let proj_delta = LinearMap::new(store, &format!("{name}.proj_delta"), di, di, false);
        // softplus(bias) starts log-uniform in [DT_MIN, DT_MAX]
        let delta_bias = store.add_sampled(format!("{name}.delta_bias"), &[di], |rng| {
            let u: f64 = rng.gen();
            inverse_softplus((DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp())
        });
        let d_skip = store.add(format!("{name}.d_skip"), Tensor::full(&[di], 1.0));
        let out_proj = LinearMap::new(store, &format!("{name}.out_proj"), di, dh, true);
        let norm_out = NormParams::new(store, &format!("{name}.norm_out"), dh);
        Ok(Self {
            in_proj,
            a_log,
            proj_b,
            proj_c,
            proj_delta,
            delta_bias,
            d_skip,
            out_proj,
            norm_in,
            norm_out,
            config: config.clone(),
        })
    }

    /// `A = −exp(A_log)`.
    pub fn transition(&self, g: &mut Graph, p: &Bound) -> Var {
        let e = g.exp(p.var(self.a_log));
        g.scale(e, -1.0)
    }

    /// `U = in_proj(h)`, `B = s_B(U)`, `C = s_C(U)`,
    /// `Δ = softplus(bias + s_Δ(U))`.
    pub fn project(&self, g: &mut Graph, p: &Bound, h_in: Var) -> Result<Projections> {
        let u = self.in_proj.forward(g, p, h_in)?;
        let b = self.proj_b.forward(g, p, u)?;
        let c = self.proj_c.forward(g, p, u)?;
        let pre = self.proj_delta.forward(g, p, u)?;
        let pre = g.add_row(pre, p.var(self.delta_bias))?;
        let delta = g.softplus(pre);
        Ok(Projections { u, b, c, delta })
    }

    /// Raw scan output `[G, 𝒯, d_inner]` for the layer-normed input.
    pub fn scan(&self, g: &mut Graph, p: &Bound, h_in: Var) -> Result<Var> {
        let proj = self.project(g, p, h_in)?;
        let a = self.transition(g, p);
        g.selective_scan(proj.delta, a, proj.b, proj.c, proj.u, p.var(self.d_skip))
    }

    /// Everything except the residual: norm → SSM → out-projection → norm.
    pub fn transform_path(&self, g: &mut Graph, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.config.d_model {
            return Err(Error::shape("mamba_block", s, &[0, 0, self.config.d_model]));
        }
        let h = self.norm_in.forward(g, p, x, eps)?;
        let y = self.scan(g, p, h)?;
        let o = self.out_proj.forward(g, p, y)?;
        self.norm_out.forward(g, p, o, eps)
    }

    /// `x̄[G, 𝒯, d_h]` → `Normalization(out_proj(scan)) + x̄`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        let path = self.transform_path(g, p, x, eps)?;
        g.add(path, x)
    }
}
