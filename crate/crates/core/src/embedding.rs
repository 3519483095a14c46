//! Input embedding: dense feature map, weekday and time-of-day lookup
//! tables, and a learned spatio-temporal adaptive tensor, concatenated on
//! the feature axis as `[feature | weekday | time-of-day | adaptive]`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{Bound, LinearMap, ParamId, ParamStore};

pub const DAYS_PER_WEEK: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    /// Feature-embedding width.
    pub d_embed: usize,
    /// Adaptive-embedding width.
    pub d_adaptive: usize,
    /// Input horizon in frames.
    pub input_len: usize,
    pub num_nodes: usize,
    /// Raw feature width per node.
    pub input_dim: usize,
    pub steps_per_day: usize,
}

impl EmbedConfig {
    /// Hidden width `3·d_e + d_s`.
    pub fn d_hidden(&self) -> usize {
        3 * self.d_embed + self.d_adaptive
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_embed", self.d_embed),
            ("d_adaptive", self.d_adaptive),
            ("input_len", self.input_len),
            ("num_nodes", self.num_nodes),
            ("input_dim", self.input_dim),
            ("steps_per_day", self.steps_per_day),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        LinearMap::num_scalars(self.input_dim, self.d_embed, true)
            + DAYS_PER_WEEK * self.d_embed
            + self.steps_per_day * self.d_embed
            + self.input_len * self.num_nodes * self.d_adaptive
    }
}

#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub feature_map: LinearMap,
    pub weekday_table: ParamId,
    pub tod_table: ParamId,
    pub adaptive: ParamId,
}

impl EmbedParams {
    pub fn new(store: &mut ParamStore, cfg: &EmbedConfig) -> Self {
        Self {
            feature_map: LinearMap::new(store, "embed.feature", cfg.input_dim, cfg.d_embed, true),
            weekday_table: store.add_xavier("embed.weekday", &[DAYS_PER_WEEK, cfg.d_embed]),
            tod_table: store.add_xavier("embed.time_of_day", &[cfg.steps_per_day, cfg.d_embed]),
            adaptive: store.add_xavier(
                "embed.adaptive",
                &[cfg.input_len, cfg.num_nodes, cfg.d_adaptive],
            ),
        }
    }
}

/// Feature embedding of `x[B, M, N, d]` into `[B, M, N, d_e]`.
pub fn embed_features(g: &mut Graph, p: &Bound, params: &EmbedParams, cfg: &EmbedConfig, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != cfg.input_len || s[2] != cfg.num_nodes || s[3] != cfg.input_dim {
        return Err(Error::shape(
            "embed_features",
            s,
            &[0, cfg.input_len, cfg.num_nodes, cfg.input_dim],
        ));
    }
    params.feature_map.forward(g, p, x)
}

/// Cyclical embedding for `batch` windows. Index slices are `batch · M`
/// long, window-major. Output `[B, M, N, 2·d_e]`, identical across nodes.
pub fn embed_calendar(
    g: &mut Graph,
    p: &Bound,
    params: &EmbedParams,
    cfg: &EmbedConfig,
    weekday_idx: &[usize],
    tod_idx: &[usize],
    batch: usize,
) -> Result<Var> {
    let m = cfg.input_len;
    if weekday_idx.len() != batch * m || tod_idx.len() != batch * m {
        return Err(Error::InvalidShape(format!(
            "calendar indices of length {}/{} for {batch} windows of {m} frames",
            weekday_idx.len(),
            tod_idx.len()
        )));
    }
    if let Some(&bad) = weekday_idx.iter().find(|&&w| w >= DAYS_PER_WEEK) {
        return Err(Error::Index {
            what: "weekday index",
            index: bad,
            len: DAYS_PER_WEEK,
        });
    }
    if let Some(&bad) = tod_idx.iter().find(|&&t| t >= cfg.steps_per_day) {
        return Err(Error::Index {
            what: "time-of-day index",
            index: bad,
            len: cfg.steps_per_day,
        });
    }
    let de = cfg.d_embed;
    let w = g.gather(p.var(params.weekday_table), weekday_idx)?;
    let t = g.gather(p.var(params.tod_table), tod_idx)?;
    let both = g.concat(&[w, t], 1)?;
    let both = g.reshape(both, &[batch, m, 1, 2 * de])?;
    g.broadcast_to(both, &[batch, m, cfg.num_nodes, 2 * de])
}

/// The shared adaptive tensor, repeated for every window: `[B, M, N, d_s]`.
pub fn embed_adaptive(g: &mut Graph, p: &Bound, params: &EmbedParams, cfg: &EmbedConfig, batch: usize) -> Result<Var> {
    g.broadcast_to(
        p.var(params.adaptive),
        &[batch, cfg.input_len, cfg.num_nodes, cfg.d_adaptive],
    )
}

/// Concatenate `[feature | cyclical | adaptive]` on the last axis.
pub fn assemble_hidden(g: &mut Graph, zf: Var, zc: Var, zs: Var) -> Result<Var> {
    let (sf, sc, ss) = (g.shape(zf), g.shape(zc), g.shape(zs));
    let lead = |s: &[usize]| s[..s.len().saturating_sub(1)].to_vec();
    if sf.is_empty() || lead(sf) != lead(sc) || lead(sf) != lead(ss) {
        return Err(Error::shape("assemble_hidden", sf, if lead(sf) != lead(sc) { sc } else { ss }));
    }
    if sc[sc.len() - 1] != 2 * sf[sf.len() - 1] {
        return Err(Error::shape("assemble_hidden", sf, sc));
    }
    let axis = sf.len() - 1;
    g.concat(&[zf, zc, zs], axis)
}

/// Full embedding of a batch: `x[B, M, N, d]` → `[B, M, N, d_h]`.
pub fn embed(
    g: &mut Graph,
    p: &Bound,
    params: &EmbedParams,
    cfg: &EmbedConfig,
    x: Var,
    weekday_idx: &[usize],
    tod_idx: &[usize],
) -> Result<Var> {
    let batch = g.shape(x)[0];
    let zf = embed_features(g, p, params, cfg, x)?;
    let zc = embed_calendar(g, p, params, cfg, weekday_idx, tod_idx, batch)?;
    let zs = embed_adaptive(g, p, params, cfg, batch)?;
    assemble_hidden(g, zf, zc, zs)
}

/// Weekday and time-of-day indices for the `m` frames starting at absolute
/// frame `t0`.
pub fn calendar_indices(t0: usize, m: usize, steps_per_day: usize, start_weekday: usize) -> (Vec<usize>, Vec<usize>) {
    let frames = t0..t0 + m;
    let weekday = frames
        .clone()
        .map(|t| (start_weekday + t / steps_per_day) % DAYS_PER_WEEK)
        .collect();
    let tod = frames.map(|t| t % steps_per_day).collect();
    (weekday, tod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg() -> EmbedConfig {
        EmbedConfig {
            d_embed: 3,
            d_adaptive: 2,
            input_len: 2,
            num_nodes: 3,
            input_dim: 1,
            steps_per_day: 288,
        }
    }

    #[test]
    fn hidden_width() {
        let c = EmbedConfig {
            d_embed: 24,
            d_adaptive: 8,
            ..cfg()
        };
        assert_eq!(c.d_hidden(), 80);
    }

    #[test]
    fn calendar_examples() {
        let (w, t) = calendar_indices(300, 3, 288, 0);
        assert_eq!((w[0], t[0]), (1, 12));
        let (w, t) = calendar_indices(0, 1, 288, 4);
        assert_eq!((w[0], t[0]), (4, 0));
        let (w, _) = calendar_indices(288 * 7, 1, 288, 4);
        assert_eq!(w[0], 4);
    }

    #[test]
    fn feature_map_shapes_and_bias() {
        let c = EmbedConfig {
            d_embed: 24,
            ..cfg()
        };
        let mut store = ParamStore::new(0);
        let params = EmbedParams::new(&mut store, &c);
        store.get_mut(params.feature_map.weight).value.data_mut().fill(0.0);
        store.get_mut(params.feature_map.bias.unwrap()).value.data_mut().fill(1.5);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(Tensor::full(&[1, 2, 3, 1], 5.0));
        let zf = embed_features(&mut g, &p, &params, &c, x).unwrap();
        assert_eq!(g.shape(zf), &[1, 2, 3, 24]);
        assert!(g.value(zf).data().iter().all(|&v| v == 1.5));

        store.get_mut(params.feature_map.weight).value.data_mut().fill(1.0);
        store.get_mut(params.feature_map.bias.unwrap()).value.data_mut().fill(0.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(Tensor::full(&[1, 2, 3, 1], 5.0));
        let zf = embed_features(&mut g, &p, &params, &c, x).unwrap();
        assert!(g.value(zf).data().iter().all(|&v| v == 5.0));

        let bad = g.leaf(Tensor::zeros(&[1, 2, 4, 1]));
        assert!(embed_features(&mut g, &p, &params, &c, bad).is_err());
    }

    #[test]
    fn calendar_lookup_and_broadcast() {
        let c = cfg();
        let mut store = ParamStore::new(3);
        let params = EmbedParams::new(&mut store, &c);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let zc = embed_calendar(&mut g, &p, &params, &c, &[2, 2], &[0, 0], 1).unwrap();
        let out = g.value(zc).clone();
        assert_eq!(out.shape(), &[1, 2, 3, 6]);
        let tod0 = store.get(params.tod_table).value.slice_axis(0, 0, 1).unwrap();
        let wd2 = store.get(params.weekday_table).value.slice_axis(0, 2, 1).unwrap();
        for m in 0..2 {
            for n in 0..3 {
                for j in 0..3 {
                    assert_eq!(out.get(&[0, m, n, j]), wd2.data()[j]);
                    assert_eq!(out.get(&[0, m, n, 3 + j]), tod0.data()[j]);
                }
            }
        }
        assert!(matches!(
            embed_calendar(&mut g, &p, &params, &c, &[7, 0], &[0, 0], 1),
            Err(Error::Index { .. })
        ));
        assert!(matches!(
            embed_calendar(&mut g, &p, &params, &c, &[0, 0], &[0, 288], 1),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn concatenation_order() {
        let c = cfg();
        let mut store = ParamStore::new(11);
        let params = EmbedParams::new(&mut store, &c);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.leaf(Tensor::from_fn(&[1, 2, 3, 1], |i| i as f64));
        let z = embed(&mut g, &p, &params, &c, x, &[0, 1], &[5, 6]).unwrap();
        let zv = g.value(z).clone();
        assert_eq!(zv.shape(), &[1, 2, 3, c.d_hidden()]);
        let zf = embed_features(&mut g, &p, &params, &c, x).unwrap();
        assert_eq!(zv.slice_axis(3, 0, 3).unwrap(), *g.value(zf));
        let adaptive = store.get(params.adaptive).value.reshape(&[1, 2, 3, 2]).unwrap();
        assert_eq!(zv.slice_axis(3, 9, 2).unwrap(), adaptive);
    }

    #[test]
    fn assemble_rejects_inconsistent_nodes() {
        let mut g = Graph::new();
        let zf = g.leaf(Tensor::zeros(&[2, 3, 4]));
        let zc = g.leaf(Tensor::zeros(&[2, 3, 8]));
        let zs = g.leaf(Tensor::zeros(&[2, 4, 2]));
        assert!(assemble_hidden(&mut g, zf, zc, zs).is_err());
    }

    #[test]
    fn weekday_gradient_is_sparse() {
        let c = cfg();
        let mut store = ParamStore::new(2);
        let params = EmbedParams::new(&mut store, &c);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let zc = embed_calendar(&mut g, &p, &params, &c, &[3, 5], &[1, 2], 1).unwrap();
        let loss = g.sum(zc);
        let grads = g.backward(loss).unwrap();
        store.accumulate_grads(&p, &grads);
        let gw = &store.get(params.weekday_table).grad;
        for row in 0..DAYS_PER_WEEK {
            let touched = row == 3 || row == 5;
            for j in 0..c.d_embed {
                // each looked-up row is broadcast to 3 nodes
                assert_eq!(gw.get(&[row, j]), if touched { 3.0 } else { 0.0 });
            }
        }
    }
}
