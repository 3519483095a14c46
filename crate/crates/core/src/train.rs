//! MAE training with Adam, step-decayed learning rate, early stopping on
//! validation MAE, and resumable state.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{Batch, Scaler, SplitSpec, WindowSet, WindowSource, Windows};
use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, Metrics};
use crate::model::Model;
use crate::optim::{Adam, LrSchedule};
use crate::param::Bound;
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STATE_CHECKPOINT: &str = "state.ckpt";
pub const EPOCHS_CSV: &str = "epochs.csv";
pub const EPOCH_TIMES_CSV: &str = "epoch_times.csv";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Epochs (1-based) at which the learning rate is halved.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mape_floor: f64,
    pub split: SplitSpec,
    /// Stop as soon as an epoch's training MAE falls below this.
    pub target_train_mae: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            milestones: vec![25, 50],
            batch_size: 16,
            patience: 30,
            max_epochs: 100,
            seed: 0,
            mape_floor: 10.0,
            split: SplitSpec::SIX_TWO_TWO,
            target_train_mae: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch size and max epochs must be ≥ 1".into()));
        }
        if !(self.mape_floor >= 0.0) {
            return Err(Error::Config(format!("MAPE floor must be ≥ 0, got {}", self.mape_floor)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr0, self.milestones.clone())
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let milestones = self.milestones.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut kv = vec![
            ("train.lr0".to_string(), format!("{:e}", self.lr0)),
            ("train.milestones".to_string(), milestones),
            ("train.batch_size".to_string(), self.batch_size.to_string()),
            ("train.patience".to_string(), self.patience.to_string()),
            ("train.max_epochs".to_string(), self.max_epochs.to_string()),
            ("train.seed".to_string(), self.seed.to_string()),
            ("train.mape_floor".to_string(), format!("{:e}", self.mape_floor)),
            ("train.split".to_string(), self.split.to_string()),
        ];
        if let Some(t) = self.target_train_mae {
            kv.push(("train.target_train_mae".to_string(), format!("{t:e}")));
        }
        kv
    }

    pub fn from_key_values(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            let bad = || Error::Config(format!("bad value `{v}` for `{k}`"));
            match k.as_str() {
                "train.lr0" => cfg.lr0 = v.parse().map_err(|_| bad())?,
                "train.milestones" => {
                    cfg.milestones = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.trim().parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?
                }
                "train.batch_size" => cfg.batch_size = v.parse().map_err(|_| bad())?,
                "train.patience" => cfg.patience = v.parse().map_err(|_| bad())?,
                "train.max_epochs" => cfg.max_epochs = v.parse().map_err(|_| bad())?,
                "train.seed" => cfg.seed = v.parse().map_err(|_| bad())?,
                "train.mape_floor" => cfg.mape_floor = v.parse().map_err(|_| bad())?,
                "train.split" => cfg.split = v.parse()?,
                "train.target_train_mae" => cfg.target_train_mae = Some(v.parse().map_err(|_| bad())?),
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mae: f64,
    /// Validation MAE, or the training MAE when there is no validation split.
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    /// `None` when the test split holds no windows.
    pub test: Option<Metrics>,
}

impl RunReport {
    /// Deterministic per-epoch losses, one row per epoch.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_mae,val_mae\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, e.train_mae, e.val_mae));
        }
        s
    }

    pub fn epoch_times_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.6}\n", e.epoch, e.seconds));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(EPOCHS_CSV), self.epochs_csv())?;
        fs::write(dir.join(EPOCH_TIMES_CSV), self.epoch_times_csv())?;
        if let Some(m) = &self.test {
            fs::write(dir.join(METRICS_CSV), metrics_csv(m))?;
        }
        Ok(())
    }
}

/// Rows are forecast steps `1..=Z` followed by the aggregate.
pub fn metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("step,mae,rmse,mape\n");
    for (k, r) in m.per_step.iter().enumerate() {
        s.push_str(&format!("{},{},{},{}\n", k + 1, r.mae, r.rmse, r.mape));
    }
    let o = &m.overall;
    s.push_str(&format!("all,{},{},{}\n", o.mae, o.rmse, o.mape));
    s
}

/// Model forecast mapped back to raw units, `[B, Z, N, d]`.
pub fn forward_raw(model: &Model, g: &mut Graph, p: &Bound, scaler: &Scaler, batch: &Batch) -> Result<Var> {
    let x = g.leaf(batch.x.clone());
    let out = model.forward(g, p, x, &batch.weekday, &batch.tod)?;
    let shape = g.shape(out).to_vec();
    let width = scaler.std.len();
    let flat = g.reshape(out, &[shape[0], shape[1], width])?;
    let std = g.leaf(scaler.std.reshape(&[width])?);
    let mean = g.leaf(scaler.mean.reshape(&[width])?);
    let scaled = g.mul_row(flat, std)?;
    let raw = g.add_row(scaled, mean)?;
    g.reshape(raw, &shape)
}

/// Raw-unit predictions for a batch without recording a tape.
pub fn predict_raw(model: &Model, scaler: &Scaler, batch: &Batch) -> Result<Tensor> {
    let mut g = Graph::inference();
    let p = model.store.bind(&mut g);
    let y = forward_raw(model, &mut g, &p, scaler, batch)?;
    Ok(g.value(y).clone())
}

/// Per-step and aggregate metrics over every window of `set`, in order.
/// Batches may run on the current rayon pool; accumulation is sequential.
pub fn evaluate(model: &Model, source: &WindowSource, set: &WindowSet, batch_size: usize, floor: f64) -> Result<Metrics> {
    if set.is_empty() {
        return Err(Error::Config("evaluation split has no windows".into()));
    }
    let batches = source.ordered_batches(set, batch_size);
    let preds = batches
        .par_iter()
        .map(|idx| {
            let b = source.batch(set, idx)?;
            let y_hat = predict_raw(model, &source.scaler, &b)?;
            Ok((y_hat, b.y))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = MetricAccumulator::new(set.horizon, floor);
    for (y_hat, y) in &preds {
        acc.push(y_hat, y)?;
    }
    acc.finish()
}

/// Patience counter over a monitored loss; strictly lower is better.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Record `loss` for `epoch`; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: Adam,
    pub epochs: Vec<EpochRecord>,
    pub best_params: Tensor,
    pub stopping: EarlyStopping,
    /// Early stopping or the target loss ended the run.
    pub finished: bool,
}

impl TrainState {
    pub fn new(model: &Model, patience: usize) -> Self {
        Self {
            adam: Adam::new(&model.store),
            epochs: Vec::new(),
            best_params: model.store.flatten(),
            stopping: EarlyStopping::new(patience),
            finished: false,
        }
    }

    pub fn to_checkpoint(&self, model: &Model, scaler: &Scaler, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = model.to_checkpoint();
        ck.manifest.extend(cfg.to_key_values());
        scaler.to_checkpoint(&mut ck);
        self.adam.to_checkpoint(&model.store, &mut ck);
        ck.set("state.best_val_mae", format!("{:e}", self.stopping.best));
        ck.set("state.best_epoch", self.stopping.best_epoch);
        ck.set("state.bad_epochs", self.stopping.bad_epochs);
        ck.set("state.finished", self.finished);
        ck.push_tensor("state.best_params", self.best_params.clone());
        let rows = self.epochs.len();
        if rows > 0 {
            let hist = self
                .epochs
                .iter()
                .flat_map(|e| [e.epoch as f64, e.lr, e.train_mae, e.val_mae, e.seconds])
                .collect();
            ck.push_tensor("state.history", Tensor::new(vec![rows, 5], hist).expect("history shape"));
        }
        ck
    }

    pub fn from_checkpoint(model: &Model, cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let best_params = ck.require_tensor("state.best_params")?.clone();
        if best_params.len() != model.store.num_scalars() {
            return Err(Error::Checkpoint("best parameter vector does not fit the model".into()));
        }
        let epochs = match ck.tensor("state.history") {
            None => Vec::new(),
            Some(h) => h
                .data()
                .chunks(5)
                .map(|r| EpochRecord {
                    epoch: r[0] as usize,
                    lr: r[1],
                    train_mae: r[2],
                    val_mae: r[3],
                    seconds: r[4],
                })
                .collect(),
        };
        Ok(Self {
            adam: Adam::from_checkpoint(&model.store, ck)?,
            epochs,
            best_params,
            stopping: EarlyStopping {
                patience: cfg.patience,
                best: ck.require("state.best_val_mae")?,
                best_epoch: ck.require("state.best_epoch")?,
                bad_epochs: ck.require("state.bad_epochs")?,
            },
            finished: ck.require("state.finished")?,
        })
    }
}

/// Best-model checkpoint: configuration, scaler and best parameters.
pub fn best_checkpoint(model: &Model, scaler: &Scaler, cfg: &TrainConfig) -> Checkpoint {
    let mut ck = model.to_checkpoint();
    ck.manifest.extend(cfg.to_key_values());
    scaler.to_checkpoint(&mut ck);
    ck
}

fn train_epoch(
    model: &mut Model,
    source: &WindowSource,
    set: &WindowSet,
    cfg: &TrainConfig,
    adam: &mut Adam,
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng_for(cfg.seed, stream::SHUFFLE_BASE + epoch as u64));
    let mut total = 0.0;
    for idx in order.chunks(cfg.batch_size) {
        let batch = source.batch(set, idx)?;
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let y_hat = forward_raw(model, &mut g, &p, &source.scaler, &batch)?;
        let y = g.leaf(batch.y.clone());
        let diff = g.sub(y_hat, y)?;
        let abs = g.abs(diff);
        let loss = g.mean(abs);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NaN("training loss"));
        }
        let grads = g.backward(loss)?;
        model.store.zero_grad();
        model.store.accumulate_grads(&p, &grads);
        adam.step(&mut model.store, lr)?;
        total += value * idx.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Train from scratch. When `out_dir` is given, the best and resumable
/// checkpoints and the report CSVs are written there after every epoch.
pub fn train(model: &mut Model, source: &WindowSource, windows: &Windows, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    let state = TrainState::new(model, cfg.patience);
    run(model, source, windows, cfg, state, out_dir)
}

/// Continue from a state checkpoint written by [`train`].
pub fn resume(source: &WindowSource, windows: &Windows, ck: &Checkpoint, out_dir: Option<&Path>) -> Result<(Model, RunReport)> {
    let mut model = Model::from_checkpoint(ck)?;
    let cfg = TrainConfig::from_key_values(&ck.manifest)?;
    let state = TrainState::from_checkpoint(&model, &cfg, ck)?;
    let report = run(&mut model, source, windows, &cfg, state, out_dir)?;
    Ok((model, report))
}

fn run(
    model: &mut Model,
    source: &WindowSource,
    windows: &Windows,
    cfg: &TrainConfig,
    mut state: TrainState,
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    cfg.validate()?;
    if windows.train.is_empty() {
        return Err(Error::Config("training split has no windows".into()));
    }
    let schedule = cfg.schedule();
    let monitor = if windows.val.is_empty() { None } else { Some(&windows.val) };
    while !state.finished && state.epochs.len() < cfg.max_epochs {
        let epoch = state.epochs.len() + 1;
        let lr = schedule.lr_at(epoch);
        let start = Instant::now();
        let train_mae = train_epoch(model, source, &windows.train, cfg, &mut state.adam, epoch, lr)?;
        let val_mae = match monitor {
            Some(set) => evaluate(model, source, set, cfg.batch_size.max(64), cfg.mape_floor)
                .map(|m| m.overall.mae)
                .or_else(|e| match e {
                    // MAE is defined even when every target sits below the MAPE floor
                    Error::UndefinedMetric(_) => evaluate(model, source, set, cfg.batch_size.max(64), 0.0).map(|m| m.overall.mae),
                    e => Err(e),
                })?,
            None => train_mae,
        };
        state.epochs.push(EpochRecord {
            epoch,
            lr,
            train_mae,
            val_mae,
            seconds: start.elapsed().as_secs_f64(),
        });
        if state.stopping.observe(epoch, val_mae) {
            state.best_params = model.store.flatten();
        }
        let reached = cfg.target_train_mae.is_some_and(|t| train_mae < t);
        if state.stopping.should_stop() || reached {
            state.finished = true;
        }
        if let Some(dir) = out_dir {
            persist(dir, model, source, cfg, &state)?;
        }
    }

    model.store.set_flat(state.best_params.data())?;
    let test = if windows.test.is_empty() {
        None
    } else {
        Some(evaluate(model, source, &windows.test, cfg.batch_size.max(64), cfg.mape_floor)?)
    };
    let report = RunReport {
        epochs: state.epochs.clone(),
        best_epoch: state.stopping.best_epoch,
        best_val_mae: state.stopping.best,
        test,
    };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

fn persist(dir: &Path, model: &Model, source: &WindowSource, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    state.to_checkpoint(model, &source.scaler, cfg).save(dir.join(STATE_CHECKPOINT))?;
    if state.stopping.best_epoch == state.epochs.len() {
        best_checkpoint(model, &source.scaler, cfg).save(dir.join(BEST_CHECKPOINT))?;
    }
    let partial = RunReport {
        epochs: state.epochs.clone(),
        best_epoch: state.stopping.best_epoch,
        best_val_mae: state.stopping.best,
        test: None,
    };
    fs::write(dir.join(EPOCHS_CSV), partial.epochs_csv())?;
    fs::write(dir.join(EPOCH_TIMES_CSV), partial.epoch_times_csv())?;
    Ok(())
}
