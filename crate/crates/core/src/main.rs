use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chrono::Duration;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use stella::config::RunConfig;
use stella::data::{parse_timestamp, synth_table, write_csv, DatasetPreset, SeriesTable, Split};
use stella::experiment::{self, SweepAxis};
use stella::model::{Stella, Variant};
use stella::training::write_history_csv;

#[derive(Parser, Debug)]
#[command(name = "stella", version, about = "Decomposition-guided, prompt-conditioned forecaster")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Preset name (ETTh1, weather, ...) or a CSV path.
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    seq_len: Option<usize>,
    #[arg(long, global = true)]
    pred_len: Option<usize>,
    /// Variant to build: full, no_nstl, no_tcp, no_fbp or no_csp.
    #[arg(long, global = true)]
    ablate: Option<String>,
    /// Directory for artifacts; created when missing.
    #[arg(long, global = true, default_value = "stella-out")]
    out_dir: PathBuf,
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the split and window manifest of a dataset.
    Inspect,
    /// Render the prompt texts of one window.
    Textualize {
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Use trained decomposition parameters from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and write checkpoint, history and metrics.
    Train,
    /// Score a checkpoint on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write forecasts and gate weights for the first windows of a split.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Train the full model and every single-module ablation.
    Ablate,
    /// Train once per prompt length on one axis.
    Sweep {
        #[arg(long)]
        sweep_axis: String,
        /// Comma-separated lengths; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
    },
    /// Write pooled component embeddings and prompt vectors.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
    /// Write a synthetic CSV: a preset stand-in, a sine, or a constant.
    Synth {
        #[arg(long, default_value = "preset")]
        shape: String,
        #[arg(long, default_value_t = 500)]
        rows: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 12)]
        period: usize,
        #[arg(long)]
        output: PathBuf,
    },
}

/// Exit status 1 for usage, config and input problems, 2 for failures
/// during computation.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<stella::Error>() {
            return match e {
                stella::Error::Config(_)
                | stella::Error::InvalidArgument(_)
                | stella::Error::Parse { .. }
                | stella::Error::Io { .. }
                | stella::Error::Json(_)
                | stella::Error::Data(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        _ => return Err(stella::Error::Config(format!("split must be train, val or test, got {s:?}")).into()),
    })
}

fn resolve_config(g: &Global) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.dataset {
        cfg.data.dataset = d.clone();
    }
    if let Some(s) = g.seq_len {
        cfg.model.seq_len = s;
    }
    if let Some(h) = g.pred_len {
        cfg.model.pred_len = h;
    }
    if let Some(v) = &g.ablate {
        cfg.model.ablation = Variant::parse(v)?.ablation();
    }
    Ok(cfg.seeded())
}

fn out_dir(g: &Global) -> anyhow::Result<&Path> {
    fs::create_dir_all(&g.out_dir).with_context(|| format!("creating {}", g.out_dir.display()))?;
    Ok(&g.out_dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Stella> {
    Ok(Stella::load(path)?)
}

/// Dataset prepared with the model's own window lengths.
fn data_for(cfg: &RunConfig, model: &Stella) -> anyhow::Result<(experiment::LoadedTable, stella::training::Dataset)> {
    let loaded = experiment::load_table(&cfg.data, cfg.seed)?;
    let data = experiment::prepare_dataset(&loaded, model.config.seq_len, model.config.pred_len)?;
    if data.channels != model.config.channels {
        return Err(stella::Error::Config(format!(
            "{} has {} channels, the checkpoint expects {}",
            data.name, data.channels, model.config.channels
        ))
        .into());
    }
    Ok((loaded, data))
}

fn synth(shape: &str, rows: usize, channels: usize, period: usize, output: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    let table = match shape {
        "preset" => {
            let p = DatasetPreset::find(&cfg.data.dataset)
                .ok_or_else(|| stella::Error::Config(format!("unknown preset {:?}", cfg.data.dataset)))?;
            synth_table(&p, cfg.seed)?
        }
        "sine" | "constant" => {
            if rows == 0 || channels == 0 || period == 0 {
                return Err(stella::Error::Config("rows, channels and period must be positive".into()).into());
            }
            let t0 = parse_timestamp("2016-07-01 00:00:00").expect("fixed timestamp");
            let ts = (0..rows).map(|i| t0 + Duration::hours(i as i64)).collect();
            let values = (0..rows * channels)
                .map(|i| {
                    let (t, c) = (i / channels, i % channels);
                    if shape == "constant" {
                        1.0 + c as f64
                    } else {
                        (std::f64::consts::TAU * t as f64 / period as f64 + 0.5 * c as f64).sin()
                    }
                })
                .collect();
            let names = (0..channels).map(|c| format!("x{c}")).collect();
            SeriesTable::new(ts, values, names)?
        }
        other => return Err(stella::Error::Config(format!("shape must be preset, sine or constant, got {other:?}")).into()),
    };
    write_csv(&table, output)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let cfg = resolve_config(g)?;
    match cli.command {
        Command::Inspect => {
            let loaded = experiment::load_table(&cfg.data, cfg.seed)?;
            print_json(&experiment::inspect(&loaded, cfg.model.seq_len, cfg.model.pred_len)?)?;
        }
        Command::Textualize { window, split, checkpoint } => {
            let split = parse_split(&split)?;
            let (loaded, data, model) = match checkpoint {
                Some(p) => {
                    let m = load_checkpoint(&p)?;
                    let (l, d) = data_for(&cfg, &m)?;
                    (l, d, m)
                }
                None => {
                    cfg.validate()?;
                    let loaded = experiment::load_table(&cfg.data, cfg.seed)?;
                    let data = experiment::prepare_dataset(&loaded, cfg.model.seq_len, cfg.model.pred_len)?;
                    let m = Stella::new(experiment::model_config_for(&cfg.model, &data), cfg.seed)?;
                    (loaded, data, m)
                }
            };
            let t = experiment::textualize(&model, &data, &loaded.table.channel_names, split, window)?;
            print_json(&t)?;
        }
        Command::Train => {
            let dir = out_dir(g)?;
            let (model, summary) = experiment::run(&cfg)?;
            model.save(&dir.join("checkpoint.json"))?;
            write_history_csv(&dir.join("history.csv"), &summary.outcome.history)?;
            write_json(&dir.join("metrics.json"), &summary)?;
            fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            eprintln!(
                "{} {}: test mse {:.4} mae {:.4} (naive mse {:.4}), best epoch {}",
                summary.eval_dataset,
                summary.variant,
                summary.test.mse,
                summary.test.mae,
                summary.naive_test.mse,
                summary.outcome.best_epoch
            );
        }
        Command::Evaluate { checkpoint, split } => {
            let split = parse_split(&split)?;
            let model = load_checkpoint(&checkpoint)?;
            let (_, data) = data_for(&cfg, &model)?;
            let report = stella::training::evaluate(&model, &data, split, cfg.train.batch_size, split.name())?;
            write_json(&out_dir(g)?.join("metrics.json"), &report)?;
            print_json(&report)?;
        }
        Command::Forecast { checkpoint, split, samples } => {
            let split = parse_split(&split)?;
            let model = load_checkpoint(&checkpoint)?;
            let (loaded, data) = data_for(&cfg, &model)?;
            let f = experiment::forecast(&model, &data, split, samples)?;
            let dir = out_dir(g)?;
            let path = dir.join("forecast.csv");
            let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
            let mut header = vec!["sample".to_string(), "origin".into(), "step".into()];
            header.extend(loaded.table.channel_names.iter().cloned());
            w.write_record(&header)?;
            let (h, c) = (data.pred_len, data.channels);
            for (b, origin) in f.origins.iter().enumerate() {
                for t in 0..h {
                    let mut rec = vec![b.to_string(), origin.to_string(), t.to_string()];
                    rec.extend((0..c).map(|ch| f.forecast.at(&[b, t, ch]).to_string()));
                    w.write_record(&rec)?;
                }
            }
            w.flush()?;
            write_json(&dir.join("gates.json"), &f.gates)?;
        }
        Command::Ablate => {
            let report = experiment::ablate(&cfg)?;
            write_json(&out_dir(g)?.join("ablation.json"), &report)?;
            for r in &report.rows {
                eprintln!("{:<8} mse {:.4} mae {:.4}", r.variant, r.report.mse, r.report.mae);
            }
            print_json(&report)?;
        }
        Command::Sweep { sweep_axis, values } => {
            let axis = SweepAxis::parse(&sweep_axis)?;
            let values = if values.is_empty() { axis.default_values().to_vec() } else { values };
            let report = experiment::sweep(&cfg, axis, &values)?;
            write_json(&out_dir(g)?.join("sweep.json"), &report)?;
            print_json(&report)?;
        }
        Command::ExportEmbeddings { checkpoint, split, samples } => {
            let split = parse_split(&split)?;
            let model = load_checkpoint(&checkpoint)?;
            let (_, data) = data_for(&cfg, &model)?;
            let rows = experiment::export_embeddings(&model, &data, split, samples)?;
            let path = out_dir(g)?.join("embeddings.csv");
            let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
            let d = rows.first().map_or(0, |r| r.values.len());
            let mut header = vec!["label".to_string(), "sample".into(), "origin".into()];
            header.extend((0..d).map(|i| format!("e{i}")));
            w.write_record(&header)?;
            for r in &rows {
                let mut rec = vec![r.label.to_string(), r.sample.to_string(), r.origin.to_string()];
                rec.extend(r.values.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            eprintln!("{} rows written to {}", rows.len(), path.display());
        }
        Command::Synth { shape, rows, channels, period, output } => {
            synth(&shape, rows, channels, period, &output, &cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
