//! End-to-end forecaster: embedding → ST-Transformer blocks → ST-mixer →
//! selective SSM blocks → per-node regression head.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::embedding::{self, EmbedConfig, EmbedParams};
use crate::error::{Error, Result};
use crate::mamba::{st_mix, st_unmix, MambaBlock, MambaConfig};
use crate::param::{Bound, LinearMap, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::StTransformerBlock;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed: EmbedConfig,
    pub heads: usize,
    pub attn_layers: usize,
    pub mamba_layers: usize,
    pub expand: usize,
    pub d_state: usize,
    /// Forecast horizon Z in frames.
    pub horizon: usize,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// PEMS08-scale reference configuration (170 sensors, 12 → 12 frames).
    pub fn reference() -> Self {
        Self {
            embed: EmbedConfig {
                d_embed: 24,
                d_adaptive: 8,
                input_len: 12,
                num_nodes: 170,
                input_dim: 1,
                steps_per_day: 288,
            },
            heads: 4,
            attn_layers: 1,
            mamba_layers: 1,
            expand: 2,
            d_state: 16,
            horizon: 12,
            norm_eps: 1e-5,
        }
    }

    pub fn d_hidden(&self) -> usize {
        self.embed.d_hidden()
    }

    pub fn mamba_config(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_hidden(),
            expand: self.expand,
            d_state: self.d_state,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.heads == 0 || self.d_hidden() % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.d_hidden(),
                self.heads
            )));
        }
        if self.expand == 0 || self.d_state == 0 {
            return Err(Error::Config("expand and d_state must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_params(&self) -> usize {
        let e = &self.embed;
        LinearMap::num_scalars(e.input_len * self.d_hidden(), self.horizon * e.input_dim, true)
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let e = &self.embed;
        [
            ("model.d_embed", e.d_embed.to_string()),
            ("model.d_adaptive", e.d_adaptive.to_string()),
            ("model.input_len", e.input_len.to_string()),
            ("model.num_nodes", e.num_nodes.to_string()),
            ("model.input_dim", e.input_dim.to_string()),
            ("model.steps_per_day", e.steps_per_day.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.attn_layers", self.attn_layers.to_string()),
            ("model.mamba_layers", self.mamba_layers.to_string()),
            ("model.expand", self.expand.to_string()),
            ("model.d_state", self.d_state.to_string()),
            ("model.horizon", self.horizon.to_string()),
            ("model.norm_eps", format!("{:e}", self.norm_eps)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_key_values(pairs: &[(String, String)]) -> Result<Self> {
        let map: HashMap<&str, &str> = pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        fn field<T: std::str::FromStr>(map: &HashMap<&str, &str>, key: &str) -> Result<T> {
            let raw = map
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
        }
        let cfg = Self {
            embed: EmbedConfig {
                d_embed: field(&map, "model.d_embed")?,
                d_adaptive: field(&map, "model.d_adaptive")?,
                input_len: field(&map, "model.input_len")?,
                num_nodes: field(&map, "model.num_nodes")?,
                input_dim: field(&map, "model.input_dim")?,
                steps_per_day: field(&map, "model.steps_per_day")?,
            },
            heads: field(&map, "model.heads")?,
            attn_layers: field(&map, "model.attn_layers")?,
            mamba_layers: field(&map, "model.mamba_layers")?,
            expand: field(&map, "model.expand")?,
            d_state: field(&map, "model.d_state")?,
            horizon: field(&map, "model.horizon")?,
            norm_eps: field(&map, "model.norm_eps")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Closed-form learnable scalar count for `config`.
pub fn count_params(config: &ModelConfig) -> usize {
    config.embed.num_params()
        + config.attn_layers * StTransformerBlock::num_params(config.d_hidden())
        + config.mamba_layers * config.mamba_config().num_params()
        + config.head_params()
}

/// Wall-clock spent in each stage of a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SectionTimes {
    pub embedding: Duration,
    pub attention: Duration,
    pub mamba: Duration,
    pub head: Duration,
}

impl SectionTimes {
    pub const LABELS: [&'static str; 4] = ["embedding", "attention", "mamba", "head"];

    pub fn as_pairs(&self) -> [(&'static str, Duration); 4] {
        [
            ("embedding", self.embedding),
            ("attention", self.attention),
            ("mamba", self.mamba),
            ("head", self.head),
        ]
    }

    pub fn add(&mut self, other: &SectionTimes) {
        self.embedding += other.embedding;
        self.attention += other.attention;
        self.mamba += other.mamba;
        self.head += other.head;
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: EmbedParams,
    pub attention: Vec<StTransformerBlock>,
    pub mamba: Vec<MambaBlock>,
    pub head: LinearMap,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let embed = EmbedParams::new(&mut store, &config.embed);
        let dh = config.d_hidden();
        let attention = (0..config.attn_layers)
            .map(|i| StTransformerBlock::new(&mut store, &format!("attn{i}"), dh, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let mcfg = config.mamba_config();
        let mamba = (0..config.mamba_layers)
            .map(|i| MambaBlock::new(&mut store, &format!("mamba{i}"), &mcfg))
            .collect::<Result<Vec<_>>>()?;
        let e = &config.embed;
        let head = LinearMap::new(
            &mut store,
            "head",
            e.input_len * dh,
            config.horizon * e.input_dim,
            true,
        );
        Ok(Self {
            config,
            store,
            embed,
            attention,
            mamba,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// `x[B, M, N, d]` with window-major calendar indices (`B·M` long) →
    /// forecast `[B, Z, N, d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        weekday_idx: &[usize],
        tod_idx: &[usize],
    ) -> Result<Var> {
        self.forward_timed(g, p, x, weekday_idx, tod_idx, None)
    }

    pub fn forward_timed(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        weekday_idx: &[usize],
        tod_idx: &[usize],
        mut times: Option<&mut SectionTimes>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let e = &cfg.embed;
        let eps = cfg.norm_eps;
        let batch = g.shape(x)[0];
        let (m, n, dh) = (e.input_len, e.num_nodes, cfg.d_hidden());

        let mut clock = Instant::now();
        let mut lap = |slot: fn(&mut SectionTimes) -> &mut Duration, times: &mut Option<&mut SectionTimes>| {
            if let Some(t) = times.as_deref_mut() {
                *slot(t) += clock.elapsed();
            }
            clock = Instant::now();
        };

        let mut z = embedding::embed(g, p, &self.embed, e, x, weekday_idx, tod_idx)?;
        lap(|t| &mut t.embedding, &mut times);

        for block in &self.attention {
            z = block.forward(g, p, z, eps)?;
        }
        lap(|t| &mut t.attention, &mut times);

        if !self.mamba.is_empty() {
            let mut xm = st_mix(g, z)?;
            for block in &self.mamba {
                xm = block.forward(g, p, xm, eps)?;
            }
            z = st_unmix(g, xm, m, n)?;
        }
        lap(|t| &mut t.mamba, &mut times);

        let h = g.permute(z, &[0, 2, 1, 3])?;
        let h = g.reshape(h, &[batch, n, m * dh])?;
        let y = self.head.forward(g, p, h)?;
        let y = g.reshape(y, &[batch, n, cfg.horizon, e.input_dim])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        lap(|t| &mut t.head, &mut times);
        Ok(y)
    }

    /// Inference without recording a backward tape.
    pub fn predict(&self, x: &Tensor, weekday_idx: &[usize], tod_idx: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let xv = g.leaf(x.clone());
        let y = self.forward(&mut g, &p, xv, weekday_idx, tod_idx)?;
        Ok(g.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.manifest = self.config.to_key_values();
        for (name, param) in self.store.iter() {
            ck.push_tensor(format!("param.{name}"), param.value.clone());
        }
        ck
    }

    /// Rebuild from a checkpoint written by [`Model::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_key_values(&ck.manifest)?;
        let mut model = Model::new(config, 0)?;
        model.load_params(ck, "param.")?;
        Ok(model)
    }

    /// Overwrite parameter values from tensors named `{prefix}{param name}`.
    pub fn load_params(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", self.store.name(id));
            let t = ck.require_tensor(&name)?;
            let param = self.store.get_mut(id);
            if t.shape() != param.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    param.value.shape()
                )));
            }
            param.value = t.clone();
        }
        Ok(())
    }
}
