use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TOY: &str = r#"
seed = 3
[model]
seq_len = 16
pred_len = 4
[model.patch]
patch_len = 4
stride = 4
layers = 1
sub_blocks = 2
kernel = 2
[model.stl]
hidden = 4
[model.backbone]
layers = 1
d_model = 8
heads = 2
d_ff = 16
lora_rank = 2
[model.anchor]
lora_rank = 2
vocab_size = 512
csp_len = 2
[model.head]
rank = 2
[train]
max_epochs = 1
warmup_epochs = 0
batch_size = 16
max_train_batches = 2
max_val_batches = 1
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stella"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{args:?} printed non-JSON: {e}"))
}

fn toy_dir() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    std::fs::write(&cfg, TOY).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

fn synth(dir: &Path, name: &str, shape: &str, extra: &[&str]) -> String {
    let path = dir.join(name);
    let p = path.to_str().unwrap();
    let mut args = vec!["synth", "--shape", shape, "--rows", "300", "--output", p];
    args.extend_from_slice(extra);
    let out = run(dir, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    p.to_string()
}

fn texts(v: &Value, component: &str) -> Vec<String> {
    v["records"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["component"].as_str().map(|c| c.eq_ignore_ascii_case(component)).unwrap_or(false))
        .map(|r| r["text"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[backbone_typo]\nd_model = 8\n").unwrap();
    let out = run(dir.path(), &["--config", cfg.to_str().unwrap(), "inspect"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("backbone_typo"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["inspect", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--dataset", "/nonexistent.csv", "inspect"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--ablate", "no_everything", "inspect"]).status.code(), Some(1));
}

#[test]
fn inspect_reports_reference_window_counts() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(dir.path(), &["--dataset", "ETTh1", "--seq-len", "96", "--pred-len", "96", "inspect"]);
    let w = &v["reference_windows"];
    assert_eq!((w["train"].as_u64(), w["val"].as_u64(), w["test"].as_u64()), (Some(8545), Some(2881), Some(2881)), "{v}");
}

#[test]
fn constant_series_reads_as_stable() {
    let (dir, cfg) = toy_dir();
    let csv = synth(dir.path(), "flat.csv", "constant", &[]);
    let v = ok_json(dir.path(), &["--config", &cfg, "--dataset", &csv, "textualize"]);
    let trend = texts(&v, "trend");
    assert!(!trend.is_empty());
    assert!(trend.iter().all(|t| t.contains("stable")), "{trend:?}");
}

#[test]
fn sine_period_shows_up_as_a_lag_and_is_deterministic() {
    let (dir, cfg) = toy_dir();
    let csv = synth(dir.path(), "sine.csv", "sine", &["--period", "12", "--channels", "2"]);
    let args = ["--config", cfg.as_str(), "--dataset", csv.as_str(), "--seq-len", "96", "--pred-len", "24", "textualize", "--window", "3"];
    let a = ok_json(dir.path(), &args);
    let b = ok_json(dir.path(), &args);
    assert_eq!(a, b);
    let all: Vec<&str> = a["records"].as_array().unwrap().iter().map(|r| r["text"].as_str().unwrap()).collect();
    assert_eq!(all.len(), 6);
    assert!(all.iter().any(|t| t.contains("lag 12")), "{all:?}");
}

#[test]
fn textualize_rejects_out_of_range_window() {
    let (dir, cfg) = toy_dir();
    let csv = synth(dir.path(), "flat.csv", "constant", &[]);
    let out = run(dir.path(), &["--config", &cfg, "--dataset", &csv, "textualize", "--window", "100000"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));
}

#[test]
fn train_then_use_the_checkpoint() {
    let (dir, cfg) = toy_dir();
    let d = dir.path();
    let csv = synth(d, "sine.csv", "sine", &["--channels", "2"]);
    let base = ["--config", cfg.as_str(), "--dataset", csv.as_str()];
    let out = run(d, &[&base[..], &["train"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.json", "history.csv", "metrics.json", "config.toml"] {
        assert!(d.join(f).is_file(), "train did not write {f}");
    }
    let ck = d.join("checkpoint.json");
    let ck = ck.to_str().unwrap();

    let report = ok_json(d, &[&base[..], &["evaluate", "--checkpoint", ck]].concat());
    assert!(report["mse"].as_f64().unwrap().is_finite(), "{report}");
    assert!(d.join("metrics.json").is_file());

    let out = run(d, &[&base[..], &["forecast", "--checkpoint", ck, "--samples", "3"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(d.join("forecast.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..3], ["sample", "origin", "step"]);
    assert_eq!(header.len(), 3 + 2);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3 * 4);
    assert!(rows.iter().all(|r| r.iter().skip(3).all(|v| v.parse::<f64>().unwrap().is_finite())));
    assert!(d.join("gates.json").is_file());

    let out = run(d, &[&base[..], &["export-embeddings", "--checkpoint", ck, "--samples", "2"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(d.join("embeddings.csv")).unwrap();
    let labels: Vec<String> = rdr.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(labels.len(), 7 * 2);
    let mut distinct = labels.clone();
    distinct.sort();
    distinct.dedup();
    assert_eq!(distinct.len(), 7, "{distinct:?}");

    let out = run(d, &[&base[..], &["evaluate", "--checkpoint", "/nonexistent/ck.json"]].concat());
    assert_eq!(out.status.code(), Some(1));
}
