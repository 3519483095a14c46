//! Traffic datasets: CSV ingestion, synthetic generation, chronological
//! splits, sliding windows and per-sensor z-scoring.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{format_key_values, parse_key_values, Checkpoint};
use crate::embedding::{calendar_indices, DAYS_PER_WEEK};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// Five-minute frames.
pub const DEFAULT_STEPS_PER_DAY: usize = 288;

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficDataset {
    /// `[T, N, d]`.
    pub values: Tensor,
    pub steps_per_day: usize,
    pub start_weekday: usize,
    pub name: String,
    pub sensors: Vec<String>,
}

impl TrafficDataset {
    pub fn new(values: Tensor, steps_per_day: usize, start_weekday: usize, name: impl Into<String>) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::InvalidShape(format!("dataset must be [T, N, d], got {:?}", values.shape())));
        }
        if steps_per_day == 0 || start_weekday >= DAYS_PER_WEEK {
            return Err(Error::InvalidArgument(format!(
                "steps_per_day {steps_per_day} / start_weekday {start_weekday} out of range"
            )));
        }
        if !values.all_finite() {
            return Err(Error::NaN("dataset values"));
        }
        let sensors = (0..values.shape()[1]).map(|n| n.to_string()).collect();
        Ok(Self {
            values,
            steps_per_day,
            start_weekday,
            name: name.into(),
            sensors,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// Path of the key-value sidecar next to a CSV file.
    pub fn sidecar_path(csv: &Path) -> PathBuf {
        let mut s = csv.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    /// Parse a CSV whose header lists sensor ids and whose rows are frames.
    /// Empty cells are forward-filled per sensor; leading gaps take the
    /// sensor's first reading.
    pub fn load_csv(path: impl AsRef<Path>, steps_per_day: usize, start_weekday: usize) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let sensors: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let n = sensors.len();
        if n == 0 || sensors.iter().all(String::is_empty) {
            return Err(Error::Parse {
                line: 1,
                msg: "header has no sensor ids".into(),
            });
        }
        let mut cells: Vec<Option<f64>> = Vec::new();
        let mut frames = 0;
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(frames + 2);
            if record.len() != n {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {n} readings, found {}", record.len()),
                });
            }
            for (j, cell) in record.iter().enumerate() {
                if cell.is_empty() {
                    cells.push(None);
                    continue;
                }
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("non-numeric reading `{cell}` for sensor `{}`", sensors[j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("non-finite reading `{cell}` for sensor `{}`", sensors[j]),
                    });
                }
                cells.push(Some(v));
            }
            frames += 1;
        }
        if frames == 0 {
            return Err(Error::Parse {
                line: 2,
                msg: "no data rows".into(),
            });
        }
        let mut data = vec![0.0; frames * n];
        for j in 0..n {
            let first = (0..frames).find_map(|t| cells[t * n + j]).ok_or_else(|| Error::Parse {
                line: 2,
                msg: format!("sensor `{}` has no readings", sensors[j]),
            })?;
            let mut last = first;
            for t in 0..frames {
                if let Some(v) = cells[t * n + j] {
                    last = v;
                }
                data[t * n + j] = last;
            }
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let mut ds = Self::new(Tensor::new(vec![frames, n, 1], data)?, steps_per_day, start_weekday, name)?;
        ds.sensors = sensors;
        Ok(ds)
    }

    /// Load a CSV, taking calendar settings from its sidecar when present.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar = Self::sidecar_path(path);
        let (mut spd, mut wd, mut name) = (DEFAULT_STEPS_PER_DAY, 0, None);
        if sidecar.exists() {
            for (k, v) in parse_key_values(&fs::read_to_string(&sidecar)?)? {
                let bad = || Error::Config(format!("bad value `{v}` for `{k}` in {}", sidecar.display()));
                match k.as_str() {
                    "steps_per_day" => spd = v.parse().map_err(|_| bad())?,
                    "start_weekday" => wd = v.parse().map_err(|_| bad())?,
                    "name" => name = Some(v),
                    _ => {}
                }
            }
        }
        let mut ds = Self::load_csv(path, spd, wd)?;
        if let Some(name) = name {
            ds.name = name;
        }
        Ok(ds)
    }

    /// Write the CSV and its sidecar. Values use shortest round-trip
    /// formatting, so a reload is bit-exact.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.dim() != 1 {
            return Err(Error::InvalidArgument(format!("CSV holds one feature per sensor, dataset has {}", self.dim())));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.sensors)?;
        let n = self.nodes();
        for row in self.values.data().chunks(n) {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        let meta = vec![
            ("name".to_string(), self.name.clone()),
            ("steps_per_day".to_string(), self.steps_per_day.to_string()),
            ("start_weekday".to_string(), self.start_weekday.to_string()),
        ];
        fs::write(Self::sidecar_path(path), format_key_values(&meta))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub nodes: usize,
    pub days: usize,
    pub seed: u64,
    /// Multiplies each sensor's drawn noise level; 0 gives exact periodicity.
    pub noise_scale: f64,
}

impl SynthConfig {
    pub fn new(nodes: usize, days: usize, seed: u64) -> Self {
        Self {
            nodes,
            days,
            seed,
            noise_scale: 1.0,
        }
    }
}

pub fn generate_synthetic(nodes: usize, days: usize, seed: u64) -> Result<TrafficDataset> {
    generate_synthetic_with(&SynthConfig::new(nodes, days, seed))
}

/// Daily sinusoid per sensor with a weekend dip and Gaussian noise,
/// clipped at zero. Weekday 0 is the first frame's day; days 5 and 6 of
/// each week are the weekend.
pub fn generate_synthetic_with(cfg: &SynthConfig) -> Result<TrafficDataset> {
    if cfg.nodes == 0 || cfg.days == 0 {
        return Err(Error::InvalidArgument("synthetic data needs at least one node and one day".into()));
    }
    if !(cfg.noise_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise scale must be ≥ 0, got {}", cfg.noise_scale)));
    }
    let spd = DEFAULT_STEPS_PER_DAY;
    let mut rng = rng_for(cfg.seed, stream::SYNTHETIC);
    struct Sensor {
        base: f64,
        amp: f64,
        phase: f64,
        dip: f64,
        sigma: f64,
    }
    let sensors: Vec<Sensor> = (0..cfg.nodes)
        .map(|_| Sensor {
            base: rng.gen_range(150.0..350.0),
            amp: rng.gen_range(50.0..150.0),
            phase: rng.gen_range(0.0..2.0 * PI),
            dip: rng.gen_range(20.0..60.0),
            sigma: rng.gen_range(1.0..3.0) * cfg.noise_scale,
        })
        .collect();
    let frames = cfg.days * spd;
    let mut data = Vec::with_capacity(frames * cfg.nodes);
    for t in 0..frames {
        let tod = (t % spd) as f64;
        let weekend = (t / spd) % DAYS_PER_WEEK >= 5;
        for s in &sensors {
            let mut v = s.base + s.amp * (2.0 * PI * tod / spd as f64 + s.phase).sin();
            if weekend {
                v -= s.dip;
            }
            if s.sigma > 0.0 {
                v += Normal::new(0.0, s.sigma).expect("positive sigma").sample(&mut rng);
            }
            data.push(v.max(0.0));
        }
    }
    TrafficDataset::new(Tensor::new(vec![frames, cfg.nodes, 1], data)?, spd, 0, "synthetic")
}

/// Chronological train:val:test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl SplitSpec {
    pub const SIX_TWO_TWO: SplitSpec = SplitSpec {
        train: 6,
        val: 2,
        test: 2,
    };
    pub const SEVEN_ONE_TWO: SplitSpec = SplitSpec {
        train: 7,
        val: 1,
        test: 2,
    };

    /// Segment lengths `(train, val, test)` for `total` frames: train and
    /// validation are floored, test takes the remainder.
    pub fn segment_lengths(&self, total: usize) -> Result<(usize, usize, usize)> {
        let sum = (self.train + self.val + self.test) as usize;
        if sum == 0 || self.train == 0 {
            return Err(Error::Config(format!("invalid split {self}")));
        }
        let train = total * self.train as usize / sum;
        let val = total * self.val as usize / sum;
        Ok((train, val, total - train - val))
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::SIX_TWO_TWO
    }
}

impl std::fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split must look like 6:2:2, got `{s}`")))?;
        match parts[..] {
            [train, val, test] => {
                let spec = SplitSpec { train, val, test };
                spec.segment_lengths(1)?;
                Ok(spec)
            }
            _ => Err(Error::Config(format!("split must have three parts, got `{s}`"))),
        }
    }
}

/// Stride-1 windows inside one contiguous segment of frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSet {
    pub segment_start: usize,
    pub segment_len: usize,
    pub input_len: usize,
    pub horizon: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        (self.segment_len + 1).saturating_sub(self.input_len + self.horizon)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Absolute frame index of window `i`'s first input frame.
    pub fn start(&self, i: usize) -> usize {
        debug_assert!(i < self.len());
        self.segment_start + i
    }

    /// Frames `[first, end)` read as inputs by some window.
    pub fn input_frames(&self) -> std::ops::Range<usize> {
        if self.is_empty() {
            return self.segment_start..self.segment_start;
        }
        self.segment_start..self.segment_start + self.len() + self.input_len - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Windows {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl Windows {
    pub fn sets(&self) -> [(&'static str, &WindowSet); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    /// One line per split with its frame range and window count.
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (name, set) in self.sets() {
            out.push_str(&format!(
                "{name}: frames {}..{} -> {} windows",
                set.segment_start,
                set.segment_start + set.segment_len,
                set.len()
            ));
            if set.is_empty() {
                out.push_str(" (segment shorter than input + horizon)");
            }
            out.push('\n');
        }
        out
    }
}

pub fn make_windows(ds: &TrafficDataset, input_len: usize, horizon: usize, split: SplitSpec) -> Result<Windows> {
    if input_len == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("input length and horizon must be ≥ 1".into()));
    }
    let (tr, va, te) = split.segment_lengths(ds.frames())?;
    let set = |segment_start, segment_len| WindowSet {
        segment_start,
        segment_len,
        input_len,
        horizon,
    };
    Ok(Windows {
        train: set(0, tr),
        val: set(tr, va),
        test: set(tr + va, te),
    })
}

/// One materialized window.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficWindow {
    /// `[M, N, d]`.
    pub x: Tensor,
    /// `[Z, N, d]`.
    pub y: Tensor,
    pub weekday_idx: Vec<usize>,
    pub tod_idx: Vec<usize>,
}

pub fn window_at(ds: &TrafficDataset, set: &WindowSet, i: usize) -> Result<TrafficWindow> {
    if i >= set.len() {
        return Err(Error::Index {
            what: "window",
            index: i,
            len: set.len(),
        });
    }
    let t0 = set.start(i);
    let (weekday_idx, tod_idx) = calendar_indices(t0, set.input_len, ds.steps_per_day, ds.start_weekday);
    Ok(TrafficWindow {
        x: ds.values.slice_axis(0, t0, set.input_len)?,
        y: ds.values.slice_axis(0, t0 + set.input_len, set.horizon)?,
        weekday_idx,
        tod_idx,
    })
}

/// Per-sensor, per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    /// `[N, d]`.
    pub mean: Tensor,
    /// `[N, d]`, population standard deviation.
    pub std: Tensor,
}

impl Scaler {
    /// Fit on the frames read as inputs by the training windows, each frame
    /// counted once.
    pub fn fit(ds: &TrafficDataset, train: &WindowSet) -> Result<Self> {
        let frames = train.input_frames();
        if frames.is_empty() {
            return Err(Error::InvalidArgument("no training windows to fit the scaler on".into()));
        }
        let width = ds.nodes() * ds.dim();
        let count = frames.len() as f64;
        let slab = &ds.values.data()[frames.start * width..frames.end * width];
        let mut mean = vec![0.0; width];
        for row in slab.chunks(width) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; width];
        for row in slab.chunks(width) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / count).sqrt()).collect();
        for (c, (&s, &m)) in std.iter().zip(&mean).enumerate() {
            if s <= 1e-12 * m.abs().max(1.0) {
                return Err(Error::ZeroStd(ds.sensors[c / ds.dim()].clone()));
            }
        }
        let shape = vec![ds.nodes(), ds.dim()];
        Ok(Self {
            mean: Tensor::new(shape.clone(), mean)?,
            std: Tensor::new(shape, std)?,
        })
    }

    fn check(&self, t: &Tensor) -> Result<usize> {
        let width = self.mean.len();
        if t.ndim() < 2 || t.shape()[t.ndim() - 2..] != *self.mean.shape() {
            return Err(Error::shape("scaler", t.shape(), self.mean.shape()));
        }
        Ok(width)
    }

    /// `(v − μ)/σ` over a tensor whose trailing axes are `[N, d]`.
    pub fn standardize(&self, t: &Tensor) -> Result<Tensor> {
        let width = self.check(t)?;
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(width) {
            for ((v, m), s) in row.iter_mut().zip(self.mean.data()).zip(self.std.data()) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn inverse(&self, t: &Tensor) -> Result<Tensor> {
        let width = self.check(t)?;
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(width) {
            for ((v, m), s) in row.iter_mut().zip(self.mean.data()).zip(self.std.data()) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) {
        ck.push_tensor("scaler.mean", self.mean.clone());
        ck.push_tensor("scaler.std", self.std.clone());
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mean = ck.require_tensor("scaler.mean")?.clone();
        let std = ck.require_tensor("scaler.std")?.clone();
        if mean.shape() != std.shape() || mean.ndim() != 2 {
            return Err(Error::Checkpoint("scaler tensors disagree in shape".into()));
        }
        Ok(Self { mean, std })
    }
}

/// A stack of windows ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Standardized inputs `[B, M, N, d]`.
    pub x: Tensor,
    /// Raw targets `[B, Z, N, d]`.
    pub y: Tensor,
    /// Window-major calendar indices, `B·M` each.
    pub weekday: Vec<usize>,
    pub tod: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }
}

/// Dataset paired with its standardized copy, for assembling batches.
#[derive(Clone, Debug)]
pub struct WindowSource {
    pub dataset: TrafficDataset,
    pub scaler: Scaler,
    scaled: Tensor,
}

impl WindowSource {
    pub fn new(dataset: TrafficDataset, scaler: Scaler) -> Result<Self> {
        let scaled = scaler.standardize(&dataset.values)?;
        Ok(Self {
            dataset,
            scaler,
            scaled,
        })
    }

    pub fn batch(&self, set: &WindowSet, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let (m, z) = (set.input_len, set.horizon);
        let width = self.dataset.nodes() * self.dataset.dim();
        let mut x = Vec::with_capacity(indices.len() * m * width);
        let mut y = Vec::with_capacity(indices.len() * z * width);
        let mut weekday = Vec::with_capacity(indices.len() * m);
        let mut tod = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            if i >= set.len() {
                return Err(Error::Index {
                    what: "window",
                    index: i,
                    len: set.len(),
                });
            }
            let t0 = set.start(i);
            x.extend_from_slice(&self.scaled.data()[t0 * width..(t0 + m) * width]);
            y.extend_from_slice(&self.dataset.values.data()[(t0 + m) * width..(t0 + m + z) * width]);
            let (w, d) = calendar_indices(t0, m, self.dataset.steps_per_day, self.dataset.start_weekday);
            weekday.extend(w);
            tod.extend(d);
        }
        let (b, n, d) = (indices.len(), self.dataset.nodes(), self.dataset.dim());
        Ok(Batch {
            x: Tensor::new(vec![b, m, n, d], x)?,
            y: Tensor::new(vec![b, z, n, d], y)?,
            weekday,
            tod,
        })
    }

    /// Consecutive batches of at most `batch` windows, in order.
    pub fn ordered_batches(&self, set: &WindowSet, batch: usize) -> Vec<Vec<usize>> {
        (0..set.len())
            .collect::<Vec<_>>()
            .chunks(batch.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}
