use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stms"))
        .args(args)
        .env_remove("STMS_THREADS")
        .output()
        .expect("spawn stms")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny model on a 3-sensor, 2-day synthetic dataset.
fn small_flags(data: &Path, out: &Path, epochs: usize) -> Vec<String> {
    [
        "--data", s(data), "--out", s(out), "--window", "4", "--horizon", "3", "--d-embed", "4",
        "--d-adaptive", "4", "--d-state", "4", "--heads", "2", "--epochs", &epochs.to_string(),
    ]
    .iter()
    .map(|x| x.to_string())
    .collect()
}

fn synth_data(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("data");
    let o = stms(&["synth", "--nodes", "3", "--days", "2", "--seed", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("synthetic.csv")
}

fn train(flags: &[String], extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend(flags.iter().map(String::as_str));
    args.extend(extra);
    stms(&args)
}

#[test]
fn synth_writes_two_identical_files_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = stms(&["synth", "--nodes", "4", "--days", "14", "--seed", "1", "--out", s(out)]);
        assert_eq!(code(&o), 0);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["synthetic.csv", "synthetic.csv.meta"]);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap());
    }
}

#[test]
fn invalid_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = stms(&["synth", "--nodes", "0", "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&stms(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&stms(&["bench"])), 1);
    let o = Command::new(env!("CARGO_BIN_EXE_stms"))
        .args(["verify", "--instances", "1"])
        .env("STMS_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "model.heads=3\n").unwrap();
    let o = stms(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("heads"));
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = stms(&["eval", "--checkpoint", s(&dir.path().join("nope.ckpt")), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = stms(&["verify", "--instances", "20", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = fs::read_to_string(dir.path().join("verify.txt")).unwrap();
    assert!(table.lines().skip(1).all(|l| l.ends_with("PASS")));
    assert!(table.contains("scan_equals_materialized"));
}

#[test]
fn train_eval_and_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path());
    let run = dir.path().join("run");
    let o = train(&small_flags(&data, &run, 2), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.ckpt", "state.ckpt", "epochs.csv", "metrics.csv", "config.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let echo = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.contains("train.max_epochs=2") && echo.contains("model.num_nodes=3"));

    let ev = dir.path().join("eval");
    let ck = run.join("best.ckpt");
    let o = stms(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 + 1);
    assert_eq!(metrics, fs::read_to_string(run.join("metrics.csv")).unwrap());

    let flops: Vec<String> = ["b1", "b2"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = stms(&["bench", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&out), "--repeats", "3"]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            let bench = fs::read_to_string(out.join("bench.csv")).unwrap();
            assert_eq!(bench.lines().filter(|l| l.starts_with("sample,")).count(), 3);
            for label in ["embedding", "attention", "mamba", "head"] {
                assert!(bench.contains(&format!("section_s,{label},")));
            }
            fs::read_to_string(out.join("flops.txt")).unwrap()
        })
        .collect();
    assert_eq!(flops[0], flops[1]);
}

#[test]
fn eval_reports_twelve_steps() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path());
    let run = dir.path().join("run");
    let mut flags = small_flags(&data, &run, 1);
    for flag in ["--window", "--horizon"] {
        let i = flags.iter().position(|f| f == flag).unwrap();
        flags[i + 1] = "12".into();
    }
    assert_eq!(code(&train(&flags, &[])), 0);
    let ev = dir.path().join("eval");
    let o = stms(&["eval", "--checkpoint", s(&run.join("best.ckpt")), "--data", s(&data), "--out", s(&ev)]);
    assert_eq!(code(&o), 0);
    let m = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let steps: Vec<_> = m.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    let want: Vec<String> = (1..=12).map(|k| k.to_string()).chain(["all".to_string()]).collect();
    assert_eq!(steps, want);
}

#[test]
fn mamba_only_variant_trains() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path());
    let run = dir.path().join("run");
    let o = train(&small_flags(&data, &run, 1), &["--attn-layers", "0", "--mamba-layers", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echo = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.contains("model.attn_layers=0") && echo.contains("model.mamba_layers=1"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path());
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "train.batch_size=8\nmodel.d_state=6\ntrain.max_epochs=7\n").unwrap();
    let run = dir.path().join("run");
    let o = train(&small_flags(&data, &run, 1), &["--config", s(&cfg)]);
    assert_eq!(code(&o), 0);
    let echo = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echo.contains("train.batch_size=8"));
    // --d-state and --epochs come from flags
    assert!(echo.contains("model.d_state=4") && echo.contains("train.max_epochs=1"));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path());
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    assert_eq!(code(&train(&small_flags(&data, &full, 3), &[])), 0);
    assert_eq!(code(&train(&small_flags(&data, &part, 1), &[])), 0);
    let o = train(&small_flags(&data, &part, 3), &["--resume"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["epochs.csv", "metrics.csv"] {
        assert_eq!(fs::read_to_string(full.join(f)).unwrap(), fs::read_to_string(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablation_grid_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path());
    let out = dir.path().join("abl");
    let mut args = vec!["bench", "--grid", "1x1,1x0,0x1"];
    let flags = small_flags(&data, &out, 1);
    args.extend(flags.iter().map(String::as_str));
    let o = stms(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<_> = table.lines().collect();
    assert_eq!(lines[0], "attn_layers,mamba_layers,MAE,RMSE,MAPE,flops_m,infer_s,train_s");
    assert_eq!(lines.len(), 4);
    for (a, m) in [(1, 1), (1, 0), (0, 1)] {
        assert!(out.join(format!("per_step_a{a}_m{m}.csv")).exists());
    }
}
