//! Run configuration: built-in defaults, then an optional `key=value` file,
//! then command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use stms_core::checkpoint::{format_key_values, parse_key_values};
use stms_core::data::{generate_synthetic, TrafficDataset};
use stms_core::train::TrainConfig;
use stms_core::ModelConfig;

use crate::CliError;

pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// Dataset CSV; synthetic data is generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub attn_layers: Option<usize>,
    #[arg(long)]
    pub mamba_layers: Option<usize>,
    #[arg(long)]
    pub d_embed: Option<usize>,
    #[arg(long)]
    pub d_adaptive: Option<usize>,
    #[arg(long)]
    pub d_state: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Forecast frames Z.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Input frames M.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Chronological split ratios, e.g. `6:2:2`.
    #[arg(long)]
    pub split: Option<String>,
    /// Stop once the training MAE falls below this value.
    #[arg(long)]
    pub target_mae: Option<f64>,
    /// Sensors for generated data.
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Days for generated data.
    #[arg(long)]
    pub days: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    File(PathBuf),
    Synthetic { nodes: usize, days: usize, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<TrafficDataset, CliError> {
        Ok(match self {
            DataSource::File(p) => TrafficDataset::load(p)?,
            DataSource::Synthetic { nodes, days, seed } => generate_synthetic(*nodes, *days, *seed)?,
        })
    }
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
}

fn defaults() -> BTreeMap<String, String> {
    let mut model = ModelConfig::reference();
    model.embed.num_nodes = 4;
    let mut kv: BTreeMap<String, String> = model.to_key_values().into_iter().collect();
    kv.extend(TrainConfig::default().to_key_values());
    kv.insert("data.path".into(), String::new());
    kv.insert("data.nodes".into(), "4".into());
    kv.insert("data.days".into(), "14".into());
    kv.insert("data.seed".into(), "0".into());
    kv.insert("train.target_train_mae".into(), String::new());
    kv.insert("out".into(), "run".into());
    kv
}

fn field<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    let raw = &kv[key];
    raw.parse()
        .map_err(|_| CliError::Validation(format!("bad value `{raw}` for `{key}`")))
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self, CliError> {
        let mut kv = defaults();
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_key_values(&text)? {
                if !kv.contains_key(&k) {
                    return Err(CliError::Validation(format!("unknown config key `{k}`")));
                }
                kv.insert(k, v);
            }
        }
        let mut set = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.insert(key.to_string(), v);
            }
        };
        let s = |v: Option<usize>| v.map(|x| x.to_string());
        set("data.path", args.data.as_ref().map(|p| p.display().to_string()));
        set("out", args.out.as_ref().map(|p| p.display().to_string()));
        set("train.seed", args.seed.map(|x| x.to_string()));
        set("data.seed", args.seed.map(|x| x.to_string()));
        set("model.attn_layers", s(args.attn_layers));
        set("model.mamba_layers", s(args.mamba_layers));
        set("model.d_embed", s(args.d_embed));
        set("model.d_adaptive", s(args.d_adaptive));
        set("model.d_state", s(args.d_state));
        set("model.heads", s(args.heads));
        set("model.horizon", s(args.horizon));
        set("model.input_len", s(args.window));
        set("train.batch_size", s(args.batch));
        set("train.lr0", args.lr.map(|x| format!("{x:e}")));
        set("train.patience", s(args.patience));
        set("train.max_epochs", s(args.epochs));
        set("train.split", args.split.clone());
        set("train.target_train_mae", args.target_mae.map(|x| format!("{x:e}")));
        set("data.nodes", s(args.nodes));
        set("data.days", s(args.days));
        Self::from_map(&kv)
    }

    fn from_map(kv: &BTreeMap<String, String>) -> Result<Self, CliError> {
        let data = if kv["data.path"].is_empty() {
            DataSource::Synthetic {
                nodes: field(kv, "data.nodes")?,
                days: field(kv, "data.days")?,
                seed: field(kv, "data.seed")?,
            }
        } else {
            DataSource::File(PathBuf::from(&kv["data.path"]))
        };
        let pairs: Vec<(String, String)> = kv
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self {
            data,
            model: ModelConfig::from_key_values(&pairs)?,
            train: TrainConfig::from_key_values(&pairs)?,
            out: PathBuf::from(&kv["out"]),
        })
    }

    /// Match the model's sensor and feature counts to the dataset.
    pub fn bind_dataset(&mut self, ds: &TrafficDataset) -> Result<(), CliError> {
        let e = &mut self.model.embed;
        e.num_nodes = ds.nodes();
        e.input_dim = ds.dim();
        e.steps_per_day = ds.steps_per_day;
        self.model.validate()?;
        Ok(())
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        match &self.data {
            DataSource::File(p) => kv.push(("data.path".to_string(), p.display().to_string())),
            DataSource::Synthetic { nodes, days, seed } => {
                kv.push(("data.nodes".to_string(), nodes.to_string()));
                kv.push(("data.days".to_string(), days.to_string()));
                kv.push(("data.seed".to_string(), seed.to_string()));
            }
        }
        kv.extend(self.model.to_key_values());
        kv.extend(self.train.to_key_values());
        kv.push(("out".to_string(), self.out.display().to_string()));
        kv
    }

    /// Write the resolved configuration as `config.txt` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::write(dir.join(CONFIG_ECHO), format_key_values(&self.to_key_values()))?;
        Ok(())
    }
}
