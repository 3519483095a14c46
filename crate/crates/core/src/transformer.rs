//! Temporal and spatial multi-head self-attention with post-norm residual
//! sublayers.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{Bound, LinearMap, NormParams, ParamStore};

pub const FFN_MULT: usize = 4;

/// One attention sublayer: multi-head attention, residual, norm, ReLU
/// feed-forward, residual, norm.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub query: LinearMap,
    pub key: LinearMap,
    pub value: LinearMap,
    pub output: LinearMap,
    pub ffn_in: LinearMap,
    pub ffn_out: LinearMap,
    pub norm_attn: NormParams,
    pub norm_ffn: NormParams,
    pub heads: usize,
    pub d_model: usize,
}

/// Output of the bare attention step, before output projection.
pub struct Attended {
    /// Concatenated per-head context `[G, S, d]`.
    pub context: Var,
    /// Softmax weights `[G·heads, S, S]`.
    pub weights: Var,
    /// Value projection `[G, S, d]`.
    pub values: Var,
}

impl AttentionLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {d_model} is not divisible by {heads} heads"
            )));
        }
        let hidden = FFN_MULT * d_model;
        Ok(Self {
            query: LinearMap::new(store, &format!("{name}.query"), d_model, d_model, true),
            // a key bias only shifts each score row by a constant
            key: LinearMap::new(store, &format!("{name}.key"), d_model, d_model, false),
            value: LinearMap::new(store, &format!("{name}.value"), d_model, d_model, true),
            output: LinearMap::new(store, &format!("{name}.output"), d_model, d_model, true),
            ffn_in: LinearMap::new(store, &format!("{name}.ffn_in"), d_model, hidden, true),
            ffn_out: LinearMap::new(store, &format!("{name}.ffn_out"), hidden, d_model, true),
            norm_attn: NormParams::new(store, &format!("{name}.norm_attn"), d_model),
            norm_ffn: NormParams::new(store, &format!("{name}.norm_ffn"), d_model),
            heads,
            d_model,
        })
    }

    pub fn num_params(d_model: usize) -> usize {
        3 * LinearMap::num_scalars(d_model, d_model, true)
            + LinearMap::num_scalars(d_model, d_model, false)
            + LinearMap::num_scalars(d_model, FFN_MULT * d_model, true)
            + LinearMap::num_scalars(FFN_MULT * d_model, d_model, true)
            + 4 * d_model
    }

    fn split_heads(&self, g: &mut Graph, x: Var, groups: usize, seq: usize) -> Result<Var> {
        let dk = self.d_model / self.heads;
        let x = g.reshape(x, &[groups, seq, self.heads, dk])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[groups * self.heads, seq, dk])
    }

    /// Scaled dot-product attention over axis 1 of `x[G, S, d]`, each of
    /// the G groups independently.
    pub fn attend(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Attended> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d_model {
            return Err(Error::shape("attention", &s, &[0, 0, self.d_model]));
        }
        let (groups, seq) = (s[0], s[1]);
        let dk = self.d_model / self.heads;
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let qh = self.split_heads(g, q, groups, seq)?;
        let kh = self.split_heads(g, k, groups, seq)?;
        let vh = self.split_heads(g, v, groups, seq)?;
        let scores = g.batch_matmul(qh, kh, true)?;
        let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = g.softmax(scores)?;
        let ctx = g.batch_matmul(weights, vh, false)?;
        let ctx = g.reshape(ctx, &[groups, self.heads, seq, dk])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let context = g.reshape(ctx, &[groups, seq, self.d_model])?;
        Ok(Attended {
            context,
            weights,
            values: v,
        })
    }

    /// Full sublayer on `x[G, S, d]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, eps: f64) -> Result<Var> {
        let att = self.attend(g, p, x)?;
        let proj = self.output.forward(g, p, att.context)?;
        let res = g.add(x, proj)?;
        let h = self.norm_attn.forward(g, p, res, eps)?;
        let f = self.ffn_in.forward(g, p, h)?;
        let f = g.relu(f);
        let f = self.ffn_out.forward(g, p, f)?;
        let res = g.add(h, f)?;
        self.norm_ffn.forward(g, p, res, eps)
    }
}

/// Attention over the frame axis of `z[B, T, N, d]`, separately per node.
pub fn temporal_attention(g: &mut Graph, p: &Bound, layer: &AttentionLayer, z: Var, eps: f64) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!("expected [B, T, N, d], got {s:?}")));
    }
    let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
    let x = g.permute(z, &[0, 2, 1, 3])?;
    let x = g.reshape(x, &[b * n, t, d])?;
    let y = layer.forward(g, p, x, eps)?;
    let y = g.reshape(y, &[b, n, t, d])?;
    g.permute(y, &[0, 2, 1, 3])
}

/// Attention over the node axis of `z[B, T, N, d]`, separately per frame.
pub fn spatial_attention(g: &mut Graph, p: &Bound, layer: &AttentionLayer, z: Var, eps: f64) -> Result<Var> {
    let s = g.shape(z).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!("expected [B, T, N, d], got {s:?}")));
    }
    let (b, t, n, d) = (s[0], s[1], s[2], s[3]);
    let x = g.reshape(z, &[b * t, n, d])?;
    let y = layer.forward(g, p, x, eps)?;
    g.reshape(y, &[b, t, n, d])
}

/// Temporal then spatial attention.
#[derive(Clone, Debug)]
pub struct StTransformerBlock {
    pub temporal: AttentionLayer,
    pub spatial: AttentionLayer,
}

impl StTransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            temporal: AttentionLayer::new(store, &format!("{name}.temporal"), d_model, heads)?,
            spatial: AttentionLayer::new(store, &format!("{name}.spatial"), d_model, heads)?,
        })
    }

    pub fn num_params(d_model: usize) -> usize {
        2 * AttentionLayer::num_params(d_model)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, eps: f64) -> Result<Var> {
        let z = temporal_attention(g, p, &self.temporal, z, eps)?;
        spatial_attention(g, p, &self.spatial, z, eps)
    }
}
