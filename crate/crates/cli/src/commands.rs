use std::fs;
use std::path::Path;

use stms_core::checkpoint::Checkpoint;
use stms_core::data::{generate_synthetic, make_windows, Scaler, SplitSpec, TrafficDataset, WindowSource, Windows};
use stms_core::duality::{format_table, verify_suite};
use stms_core::metrics::Metrics;
use stms_core::profiler::{ablation_csv, ablation_run, bench_inference, count_flops};
use stms_core::train::{self, metrics_csv, TrainConfig, METRICS_CSV, STATE_CHECKPOINT};
use stms_core::{Model, ModelConfig};

use crate::config::{CommonArgs, RunConfig};
use crate::CliError;

pub const SYNTH_CSV: &str = "synthetic.csv";
pub const FLOPS_TXT: &str = "flops.txt";
pub const BENCH_CSV: &str = "bench.csv";
pub const VERIFY_TXT: &str = "verify.txt";

pub fn synth(nodes: usize, days: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let ds = generate_synthetic(nodes, days, seed)?;
    fs::create_dir_all(out)?;
    let path = out.join(SYNTH_CSV);
    ds.save_csv(&path)?;
    println!("wrote {} ({} frames × {} sensors)", path.display(), ds.frames(), ds.nodes());
    Ok(())
}

fn check_nodes(model: &ModelConfig, ds: &TrafficDataset) -> Result<(), CliError> {
    let e = &model.embed;
    if e.num_nodes != ds.nodes() || e.input_dim != ds.dim() {
        return Err(CliError::Validation(format!(
            "model expects {} sensors × {} features, dataset has {} × {}",
            e.num_nodes,
            e.input_dim,
            ds.nodes(),
            ds.dim()
        )));
    }
    Ok(())
}

fn windows_for(ds: &TrafficDataset, model: &ModelConfig, split: SplitSpec) -> Result<Windows, CliError> {
    Ok(make_windows(ds, model.embed.input_len, model.horizon, split)?)
}

fn print_metrics(label: &str, m: &Metrics) {
    let o = &m.overall;
    println!("{label}: MAE {:.4}  RMSE {:.4}  MAPE {:.2}%", o.mae, o.rmse, o.mape);
}

pub fn train(args: &CommonArgs, resume: bool) -> Result<(), CliError> {
    let mut rc = RunConfig::resolve(args)?;
    let ds = rc.data.load()?;
    let out = rc.out.clone();
    let report = if resume {
        let mut ck = Checkpoint::load(out.join(STATE_CHECKPOINT))?;
        if let Some(e) = args.epochs {
            ck.set("train.max_epochs", e);
        }
        let model_cfg = ModelConfig::from_key_values(&ck.manifest)?;
        let train_cfg = TrainConfig::from_key_values(&ck.manifest)?;
        check_nodes(&model_cfg, &ds)?;
        let windows = windows_for(&ds, &model_cfg, train_cfg.split)?;
        let source = WindowSource::new(ds, Scaler::from_checkpoint(&ck)?)?;
        println!("resuming from {}", out.join(STATE_CHECKPOINT).display());
        train::resume(&source, &windows, &ck, Some(&out))?.1
    } else {
        rc.bind_dataset(&ds)?;
        let windows = windows_for(&ds, &rc.model, rc.train.split)?;
        print!("{}", windows.report());
        fs::create_dir_all(&out)?;
        rc.echo(&out)?;
        let scaler = Scaler::fit(&ds, &windows.train)?;
        let source = WindowSource::new(ds, scaler)?;
        let mut model = Model::new(rc.model.clone(), rc.train.seed)?;
        println!("{} parameters", model.num_params());
        train::train(&mut model, &source, &windows, &rc.train, Some(&out))?
    };
    for e in &report.epochs {
        println!("epoch {:>3}  lr {:.2e}  train {:.4}  val {:.4}  ({:.1}s)", e.epoch, e.lr, e.train_mae, e.val_mae, e.seconds);
    }
    println!("best epoch {} (val MAE {:.4})", report.best_epoch, report.best_val_mae);
    if let Some(m) = &report.test {
        print_metrics("test", m);
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn load_run(args: &CommonArgs, checkpoint: &Path) -> Result<(RunConfig, Model, TrainConfig, WindowSource, Windows), CliError> {
    let rc = RunConfig::resolve(args)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = Model::from_checkpoint(&ck)?;
    let mut train_cfg = TrainConfig::from_key_values(&ck.manifest)?;
    if let Some(s) = &args.split {
        train_cfg.split = s.parse()?;
    }
    let ds = rc.data.load()?;
    check_nodes(&model.config, &ds)?;
    let windows = windows_for(&ds, &model.config, train_cfg.split)?;
    let source = WindowSource::new(ds, Scaler::from_checkpoint(&ck)?)?;
    Ok((rc, model, train_cfg, source, windows))
}

pub fn eval(args: &CommonArgs, checkpoint: &Path) -> Result<(), CliError> {
    let (rc, model, train_cfg, source, windows) = load_run(args, checkpoint)?;
    let batch = args.batch.unwrap_or(64);
    let m = train::evaluate(&model, &source, &windows.test, batch, train_cfg.mape_floor)?;
    fs::create_dir_all(&rc.out)?;
    fs::write(rc.out.join(METRICS_CSV), metrics_csv(&m))?;
    for (k, s) in m.per_step.iter().enumerate() {
        println!("step {:>2}: MAE {:.4}  RMSE {:.4}  MAPE {:.2}%", k + 1, s.mae, s.rmse, s.mape);
    }
    print_metrics("all", &m);
    Ok(())
}

fn parse_grid(raw: &str) -> Result<Vec<(usize, usize)>, CliError> {
    raw.split(',')
        .map(|cell| {
            let bad = || CliError::Validation(format!("grid entries look like `1x0`, got `{cell}`"));
            let (a, m) = cell.trim().split_once('x').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn bench(args: &CommonArgs, checkpoint: Option<&Path>, grid: Option<&str>, repeats: usize) -> Result<(), CliError> {
    match (checkpoint, grid) {
        (Some(ck), None) => {
            let (rc, model, _, source, windows) = load_run(args, ck)?;
            let flops = count_flops(&model.config);
            let report = bench_inference(&model, &source, &windows.test, args.batch.unwrap_or(64), repeats, 1)?;
            fs::create_dir_all(&rc.out)?;
            fs::write(rc.out.join(FLOPS_TXT), format!("{flops}\n"))?;
            let mut csv = String::from("kind,label,value\n");
            for (i, s) in report.samples.iter().enumerate() {
                csv.push_str(&format!("sample,{},{s:.6}\n", i + 1));
            }
            csv.push_str(&format!("summary,median,{:.6}\nsummary,iqr,{:.6}\n", report.median, report.iqr));
            csv.push_str(&format!("summary,windows,{}\n", report.windows));
            for (label, s) in &report.sections {
                csv.push_str(&format!("section_s,{label},{s:.6}\n"));
            }
            fs::write(rc.out.join(BENCH_CSV), csv)?;
            println!("{flops}");
            println!(
                "inference over {} windows: median {:.4}s, IQR {:.4}s ({} repeats)",
                report.windows, report.median, report.iqr, repeats
            );
            Ok(())
        }
        (None, Some(raw)) => {
            let grid = parse_grid(raw)?;
            let mut rc = RunConfig::resolve(args)?;
            let ds = rc.data.load()?;
            rc.bind_dataset(&ds)?;
            let windows = windows_for(&ds, &rc.model, rc.train.split)?;
            fs::create_dir_all(&rc.out)?;
            rc.echo(&rc.out)?;
            let source = WindowSource::new(ds.clone(), Scaler::fit(&ds, &windows.train)?)?;
            let rows = ablation_run(&source, &windows, &rc.model, &rc.train, &grid, Some(&rc.out))?;
            print!("{}", ablation_csv(&rows));
            Ok(())
        }
        _ => Err(CliError::Validation("bench needs either --checkpoint or --grid".into())),
    }
}

pub fn verify(seed: u64, instances: usize, out: Option<&Path>) -> Result<(), CliError> {
    if instances == 0 {
        return Err(CliError::Validation("--instances must be ≥ 1".into()));
    }
    let rows = verify_suite(seed, instances)?;
    let table = format_table(&rows);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(VERIFY_TXT), &table)?;
    }
    match rows.iter().filter(|r| !r.passed()).count() {
        0 => Ok(()),
        n => Err(CliError::Verification(n)),
    }
}
