//! Multiply-add accounting, inference timing and layer-grid ablations.
//!
//! Counts cover dense contractions only (linear maps, score and value
//! products, the scan recurrence) for one input window. Norms, softmax and
//! activations are not counted.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::autodiff::Graph;
use crate::data::{WindowSet, WindowSource, Windows};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{Model, ModelConfig, SectionTimes};
use crate::train::{self, TrainConfig};
use crate::transformer::FFN_MULT;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_HEADER: &str = "attn_layers,mamba_layers,MAE,RMSE,MAPE,flops_m,infer_s,train_s";
pub const PER_STEP_HEADER: &str = "step,MAE,RMSE,MAPE";

/// One attention sub-layer (temporal or spatial).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionFlops {
    pub qkv: u64,
    pub scores: u64,
    pub av: u64,
    pub output: u64,
    pub ffn: u64,
}

impl AttentionFlops {
    pub fn total(&self) -> u64 {
        self.qkv + self.scores + self.av + self.output + self.ffn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionBlockFlops {
    pub temporal: AttentionFlops,
    pub spatial: AttentionFlops,
}

impl AttentionBlockFlops {
    pub fn total(&self) -> u64 {
        self.temporal.total() + self.spatial.total()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MambaFlops {
    /// Input, `B`, `C` and step-size projections.
    pub projections: u64,
    pub discretize: u64,
    /// Recurrence, read-out and skip term.
    pub scan: u64,
    pub out: u64,
}

impl MambaFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.discretize + self.scan + self.out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub config: ModelConfig,
    pub embedding: u64,
    pub attention: Vec<AttentionBlockFlops>,
    pub mamba: Vec<MambaFlops>,
    pub head: u64,
}

impl FlopsReport {
    /// Totals under the same labels as [`SectionTimes`].
    pub fn sections(&self) -> [(&'static str, u64); 4] {
        [
            ("embedding", self.embedding),
            ("attention", self.attention.iter().map(AttentionBlockFlops::total).sum()),
            ("mamba", self.mamba.iter().map(MambaFlops::total).sum()),
            ("head", self.head),
        ]
    }

    pub fn total(&self) -> u64 {
        self.sections().iter().map(|(_, c)| c).sum()
    }

    /// Millions of multiply-adds.
    pub fn total_m(&self) -> f64 {
        self.total() as f64 / 1e6
    }
}

impl std::fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let e = &self.config.embed;
        writeln!(
            f,
            "T={} N={} d_h={} attn_layers={} mamba_layers={}",
            e.input_len,
            e.num_nodes,
            self.config.d_hidden(),
            self.config.attn_layers,
            self.config.mamba_layers
        )?;
        for (name, c) in self.sections() {
            writeln!(f, "{name:<10} {c:>14}")?;
        }
        write!(f, "{:<10} {:>14}  ({:.3} M)", "total", self.total(), self.total_m())
    }
}

fn attention_flops(tokens: u64, seq: u64, groups: u64, dh: u64) -> AttentionFlops {
    AttentionFlops {
        qkv: 3 * tokens * dh * dh,
        // all heads together: seq² · d_h per group
        scores: groups * seq * seq * dh,
        av: groups * seq * seq * dh,
        output: tokens * dh * dh,
        ffn: 2 * tokens * dh * FFN_MULT as u64 * dh,
    }
}

/// Closed-form multiply-add counts for one `[T, N, d]` window.
pub fn count_flops(config: &ModelConfig) -> FlopsReport {
    let e = &config.embed;
    let (t, n, d) = (e.input_len as u64, e.num_nodes as u64, e.input_dim as u64);
    let dh = config.d_hidden() as u64;
    let tokens = t * n;
    let block = AttentionBlockFlops {
        temporal: attention_flops(tokens, t, n, dh),
        spatial: attention_flops(tokens, n, t, dh),
    };
    let mc = config.mamba_config();
    let (di, ds) = (mc.d_inner() as u64, mc.d_state as u64);
    let mamba = MambaFlops {
        projections: tokens * (dh * di + 2 * di * ds + di * di),
        // Δ·a for Ã and gain·b for B̃
        discretize: 2 * tokens * di * ds,
        // Ã⊙H, B̃·u, C·H, plus D·u
        scan: 3 * tokens * di * ds + tokens * di,
        out: tokens * di * dh,
    };
    FlopsReport {
        config: config.clone(),
        embedding: tokens * d * e.d_embed as u64,
        attention: vec![block; config.attn_layers],
        mamba: vec![mamba; config.mamba_layers],
        head: n * t * dh * config.horizon as u64 * d,
    }
}

/// Wall-clock of full inference sweeps over one split.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub samples: Vec<f64>,
    pub median: f64,
    pub iqr: f64,
    /// Median per-section seconds, labelled as in [`FlopsReport::sections`].
    pub sections: Vec<(&'static str, f64)>,
    pub windows: usize,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn sweep(model: &Model, source: &WindowSource, set: &WindowSet, batch_size: usize) -> Result<(Duration, SectionTimes)> {
    let batches: Vec<_> = source
        .ordered_batches(set, batch_size)
        .iter()
        .map(|idx| source.batch(set, idx))
        .collect::<Result<_>>()?;
    let mut times = SectionTimes::default();
    let start = Instant::now();
    for b in &batches {
        let mut g = Graph::inference();
        let p = model.store.bind(&mut g);
        let x = g.leaf(b.x.clone());
        let y = model.forward_timed(&mut g, &p, x, &b.weekday, &b.tod, Some(&mut times))?;
        std::hint::black_box(g.value(y));
    }
    Ok((start.elapsed(), times))
}

/// Time `repeats` sequential forward sweeps over `set` after `warmup`
/// untimed sweeps. Batches are assembled before the clock starts.
pub fn bench_inference(
    model: &Model,
    source: &WindowSource,
    set: &WindowSet,
    batch_size: usize,
    repeats: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if repeats == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("repeats and batch size must be ≥ 1".into()));
    }
    if set.is_empty() {
        return Err(Error::Config("benchmark split has no windows".into()));
    }
    for _ in 0..warmup {
        sweep(model, source, set, batch_size)?;
    }
    let mut samples = Vec::with_capacity(repeats);
    let mut per_section: Vec<Vec<f64>> = (0..4).map(|_| Vec::with_capacity(repeats)).collect();
    for _ in 0..repeats {
        let (total, times) = sweep(model, source, set, batch_size)?;
        samples.push(total.as_secs_f64());
        for (slot, (_, d)) in per_section.iter_mut().zip(times.as_pairs()) {
            slot.push(d.as_secs_f64());
        }
    }
    let s = sorted(&samples);
    Ok(BenchReport {
        median: quantile(&s, 0.5),
        iqr: quantile(&s, 0.75) - quantile(&s, 0.25),
        sections: SectionTimes::LABELS
            .iter()
            .zip(&per_section)
            .map(|(&l, v)| (l, quantile(&sorted(v), 0.5)))
            .collect(),
        samples,
        windows: set.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub attn_layers: usize,
    pub mamba_layers: usize,
    pub test: Metrics,
    pub flops_m: f64,
    pub infer_s: f64,
    pub train_s: f64,
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let o = &self.test.overall;
        format!(
            "{},{},{},{},{},{},{:.6},{:.6}",
            self.attn_layers, self.mamba_layers, o.mae, o.rmse, o.mape, self.flops_m, self.infer_s, self.train_s
        )
    }

    pub fn per_step_file(&self) -> String {
        format!("per_step_a{}_m{}.csv", self.attn_layers, self.mamba_layers)
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn per_step_csv(m: &Metrics) -> String {
    let mut s = format!("{PER_STEP_HEADER}\n");
    for (k, r) in m.per_step.iter().enumerate() {
        s.push_str(&format!("{},{},{},{}\n", k + 1, r.mae, r.rmse, r.mape));
    }
    s
}

/// Train every `(attention, mamba)` layer count with the same training
/// settings and seed, then score and time it on the test split. Grid
/// points run one after another.
pub fn ablation_run(
    source: &WindowSource,
    windows: &Windows,
    base: &ModelConfig,
    cfg: &TrainConfig,
    grid: &[(usize, usize)],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if windows.test.is_empty() {
        return Err(Error::Config("ablation needs a non-empty test split".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &(a, m) in grid {
        let config = ModelConfig {
            attn_layers: a,
            mamba_layers: m,
            ..base.clone()
        };
        let mut model = Model::new(config.clone(), cfg.seed)?;
        let report = train::train(&mut model, source, windows, cfg, None)?;
        let test = match report.test {
            Some(t) => t,
            None => train::evaluate(&model, source, &windows.test, cfg.batch_size, cfg.mape_floor)?,
        };
        let bench = bench_inference(&model, source, &windows.test, cfg.batch_size.max(64), 3, 1)?;
        let row = AblationRow {
            attn_layers: a,
            mamba_layers: m,
            flops_m: count_flops(&config).total_m(),
            infer_s: bench.median,
            train_s: report.epochs.iter().map(|e| e.seconds).sum(),
            test,
        };
        if let Some(dir) = out_dir {
            fs::write(dir.join(row.per_step_file()), per_step_csv(&row.test))?;
        }
        rows.push(row);
    }
    if let Some(dir) = out_dir {
        fs::write(dir.join(ABLATION_CSV), ablation_csv(&rows))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_windows, Scaler, SplitSpec};
    use crate::embedding::EmbedConfig;

    fn with_layers(a: usize, m: usize) -> ModelConfig {
        ModelConfig {
            attn_layers: a,
            mamba_layers: m,
            ..ModelConfig::reference()
        }
    }

    #[test]
    fn mamba_layer_is_cheaper_than_attention_layer() {
        let cfg = ModelConfig::reference();
        assert_eq!((cfg.embed.input_len, cfg.embed.num_nodes, cfg.d_hidden()), (12, 170, 80));
        let base = count_flops(&with_layers(0, 0)).total();
        let attn = count_flops(&with_layers(1, 0)).total();
        let mamba = count_flops(&with_layers(0, 1)).total();
        let both = count_flops(&with_layers(1, 1)).total();
        assert!(base < mamba && mamba < attn && attn < both);
        assert_eq!(both, attn + mamba - base);
    }

    #[test]
    fn total_is_sum_of_parts() {
        let r = count_flops(&with_layers(2, 3));
        let manual: u64 = r.embedding
            + r.head
            + r.attention.iter().map(|b| b.temporal.total() + b.spatial.total()).sum::<u64>()
            + r.mamba.iter().map(|m| m.projections + m.discretize + m.scan + m.out).sum::<u64>();
        assert_eq!(r.total(), manual);
        assert_eq!(r.attention.len(), 2);
        assert_eq!(r.mamba.len(), 3);
        assert_eq!(count_flops(&with_layers(2, 3)), r);
    }

    #[test]
    fn doubling_window_quadruples_temporal_score_terms_only() {
        let a = with_layers(1, 1);
        let mut b = a.clone();
        b.embed.input_len *= 2;
        let (ra, rb) = (count_flops(&a), count_flops(&b));
        let (ta, tb) = (ra.attention[0].temporal, rb.attention[0].temporal);
        assert_eq!(tb.scores, 4 * ta.scores);
        assert_eq!(tb.av, 4 * ta.av);
        let (sa, sb) = (ra.attention[0].spatial, rb.attention[0].spatial);
        for (x, y) in [(ta.qkv, tb.qkv), (ta.ffn, tb.ffn), (sa.scores, sb.scores), (sa.av, sb.av)] {
            assert_eq!(y, 2 * x);
        }
        assert_eq!(rb.mamba[0].total(), 2 * ra.mamba[0].total());
    }

    #[test]
    fn zero_layers_count_embedding_and_head_only() {
        let r = count_flops(&with_layers(0, 0));
        assert_eq!(r.total(), r.embedding + r.head);
        assert_eq!(r.embedding, 12 * 170 * 24);
        assert_eq!(r.head, 170 * 12 * 80 * 12);
        assert!(r.to_string().contains("total"));
    }

    #[test]
    fn temporal_scores_follow_documented_formula() {
        let r = count_flops(&with_layers(1, 0));
        assert_eq!(r.attention[0].temporal.scores, 12 * 12 * 80 * 170);
        assert_eq!(r.attention[0].spatial.scores, 170 * 170 * 80 * 12);
    }

    fn tiny(a: usize, m: usize) -> ModelConfig {
        ModelConfig {
            embed: EmbedConfig {
                d_embed: 4,
                d_adaptive: 4,
                input_len: 4,
                num_nodes: 3,
                input_dim: 1,
                steps_per_day: 288,
            },
            heads: 2,
            attn_layers: a,
            mamba_layers: m,
            expand: 2,
            d_state: 4,
            horizon: 2,
            norm_eps: 1e-5,
        }
    }

    fn source(days: usize) -> (WindowSource, Windows) {
        let ds = generate_synthetic(3, days, 5).unwrap();
        let w = make_windows(&ds, 4, 2, SplitSpec::default()).unwrap();
        let scaler = Scaler::fit(&ds, &w.train).unwrap();
        (WindowSource::new(ds, scaler).unwrap(), w)
    }

    #[test]
    fn bench_records_samples_and_labels() {
        let (src, w) = source(2);
        let model = Model::new(tiny(1, 1), 0).unwrap();
        let set = WindowSet { segment_len: 12, ..w.test };
        let r = bench_inference(&model, &src, &set, 4, 5, 1).unwrap();
        assert_eq!(r.samples.len(), 5);
        assert_eq!(r.windows, 7);
        assert!(r.median > 0.0 && r.iqr >= 0.0);
        let labels: Vec<_> = r.sections.iter().map(|(l, _)| *l).collect();
        let flops = count_flops(&tiny(1, 1));
        assert_eq!(labels, flops.sections().iter().map(|(l, _)| *l).collect::<Vec<_>>());
        assert!(bench_inference(&model, &src, &set, 4, 0, 0).is_err());
    }

    #[test]
    fn timing_grows_with_window_count() {
        let (src, w) = source(3);
        let model = Model::new(tiny(1, 1), 0).unwrap();
        let small = WindowSet { segment_len: 5 + 16, ..w.test };
        let large = WindowSet { segment_len: 5 + 128, ..w.test };
        let a = bench_inference(&model, &src, &small, 16, 5, 1).unwrap();
        let b = bench_inference(&model, &src, &large, 16, 5, 1).unwrap();
        assert!(b.median >= 0.9 * a.median, "{} vs {}", b.median, a.median);
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.5);
        assert_eq!(quantile(&s, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn ablation_grid_writes_full_table() {
        let (src, mut w) = source(2);
        w.train.segment_len = 40;
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let grid = [(1, 1), (1, 0), (0, 1)];
        let rows = ablation_run(&src, &w, &tiny(1, 1), &cfg, &grid, Some(dir.path())).unwrap();
        assert_eq!(rows.len(), 3);
        let text = fs::read_to_string(dir.path().join(ABLATION_CSV)).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], ABLATION_HEADER);
        assert_eq!(lines.len(), 4);
        for line in &lines[1..] {
            let cells: Vec<_> = line.split(',').collect();
            assert_eq!(cells.len(), 8);
            assert!(cells.iter().all(|c| c.parse::<f64>().map(f64::is_finite).unwrap_or(false)), "{line}");
        }
        assert!(lines[1].starts_with("1,1,"));
        for r in &rows {
            let steps = fs::read_to_string(dir.path().join(r.per_step_file())).unwrap();
            assert_eq!(steps.lines().count(), 1 + 2);
        }
        let f = |a, m| count_flops(&tiny(a, m)).total_m();
        assert!((rows[0].flops_m - (f(1, 0) + f(0, 1) - f(0, 0))).abs() < 1e-9);
    }
}
