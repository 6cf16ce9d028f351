//! Dataset resolution and the multi-run workflows behind the command line:
//! inspection, textualization, training, ablation, sweeps and exports.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::anchor::{render_fbp_text, window_signatures, BehavioralSignature, CorpusMeta};
use crate::config::{DataConfig, RunConfig};
use crate::data::{
    chronological_split, gather, load_csv, load_or_synthesize, window_count, DatasetPreset, SeriesTable, Split, SplitMode,
};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{ModelConfig, Stella, Variant};
use crate::neural_stl::{passthrough, ComponentKind};
use crate::numerics::{Ctx, Tape, Tensor};
use crate::training::{evaluate, naive_report, train, Dataset, TrainMode, TrainOutcome};

pub const DATA_DIR_ENV: &str = "STELLA_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "path", rename_all = "snake_case")]
pub enum DataSource {
    File(PathBuf),
    Synthetic,
}

#[derive(Clone, Debug)]
pub struct LoadedTable {
    pub name: String,
    pub table: SeriesTable,
    pub source: DataSource,
    pub split: SplitMode,
    /// Whether the reference window counts leave room for the horizon.
    pub subtract_horizon: bool,
}

fn looks_like_path(s: &str) -> bool {
    s.contains('/') || s.contains('\\') || s.to_ascii_lowercase().ends_with(".csv")
}

/// Configured data directory, else the environment default.
pub fn data_dir(cfg: &DataConfig) -> Option<PathBuf> {
    cfg.data_dir.clone().or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// Resolves a preset name or CSV path. Presets without a file in the data
/// directory fall back to a synthetic stand-in of the same shape.
pub fn load_table(cfg: &DataConfig, seed: u64) -> Result<LoadedTable> {
    let preset = DatasetPreset::find(&cfg.dataset);
    let (name, mut table, source) = if looks_like_path(&cfg.dataset) {
        let p = Path::new(&cfg.dataset);
        let mut t = load_csv(p)?;
        if let Some(pr) = &preset {
            t.domain_tag = Some(pr.domain.to_string());
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_string();
        (stem, t, DataSource::File(p.to_path_buf()))
    } else {
        let pr = preset
            .as_ref()
            .ok_or_else(|| Error::Config(format!("unknown dataset {:?}; pass a preset name or a CSV path", cfg.dataset)))?;
        let dir = data_dir(cfg);
        let (t, from_file) = load_or_synthesize(dir.as_deref(), pr, seed)?;
        let source = match (from_file, dir) {
            (true, Some(d)) => DataSource::File(d.join(pr.file_name())),
            _ => DataSource::Synthetic,
        };
        (pr.name.to_string(), t, source)
    };
    if let Some(names) = &cfg.channels {
        table = table.select(names)?;
    }
    if let Some(n) = cfg.rows {
        table = table.head(n);
    }
    // A truncated table no longer spans the calendar months a month split needs.
    let preset_split = preset.as_ref().map(|p| p.split).filter(|s| cfg.rows.is_none() || *s != SplitMode::EttMonths);
    let split = cfg.split.or(preset_split).unwrap_or_default();
    Ok(LoadedTable {
        name,
        table,
        source,
        split,
        subtract_horizon: preset.as_ref().map_or(true, |p| p.subtract_horizon),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub dataset: String,
    pub source: DataSource,
    pub rows: usize,
    pub channels: usize,
    pub channel_names: Vec<String>,
    pub frequency: Option<String>,
    pub split: SplitMode,
    pub seq_len: usize,
    pub pred_len: usize,
    /// Segment row ranges including the lookback prefix of val and test.
    pub segments: [(Split, Segment); 3],
    /// Windows needing only `seq_len` rows.
    pub windows_input_only: WindowCounts,
    /// Windows needing `seq_len + pred_len` rows; what training iterates.
    pub windows_with_horizon: WindowCounts,
    /// The convention the dataset's reference counts use.
    pub reference_convention: &'static str,
    pub reference_windows: WindowCounts,
}

pub fn inspect(loaded: &LoadedTable, seq_len: usize, pred_len: usize) -> Result<Manifest> {
    let t = &loaded.table;
    let bundle = chronological_split(t, loaded.split, seq_len, pred_len)?;
    let counts = |sub: bool| -> Result<WindowCounts> {
        let c = |s: Split| window_count(bundle.range(s).len(), seq_len, sub, pred_len);
        Ok(WindowCounts {
            train: c(Split::Train)?,
            val: c(Split::Val)?,
            test: c(Split::Test)?,
        })
    };
    let seg = |s: Split| {
        let r = bundle.range(s);
        (s, Segment {
            start: r.start,
            end: r.end,
            len: r.len(),
        })
    };
    let input_only = counts(false)?;
    let with_horizon = counts(true)?;
    Ok(Manifest {
        dataset: loaded.name.clone(),
        source: loaded.source.clone(),
        rows: t.len(),
        channels: t.channels(),
        channel_names: t.channel_names.clone(),
        frequency: t.frequency.clone(),
        split: loaded.split,
        seq_len,
        pred_len,
        segments: [seg(Split::Train), seg(Split::Val), seg(Split::Test)],
        reference_convention: if loaded.subtract_horizon { "with_horizon" } else { "input_only" },
        reference_windows: if loaded.subtract_horizon { with_horizon.clone() } else { input_only.clone() },
        windows_input_only: input_only,
        windows_with_horizon: with_horizon,
    })
}

pub fn prepare_dataset(loaded: &LoadedTable, seq_len: usize, pred_len: usize) -> Result<Dataset> {
    Dataset::prepare(&loaded.name, &loaded.table, loaded.split, seq_len, pred_len)
}

/// Model config with sequence lengths, channel count and corpus facts taken
/// from the data where the config leaves them open.
pub fn model_config_for(cfg: &ModelConfig, data: &Dataset) -> ModelConfig {
    let mut m = cfg.clone();
    m.seq_len = data.seq_len;
    m.pred_len = data.pred_len;
    m.channels = data.channels;
    m.corpus = CorpusMeta {
        domain: cfg.corpus.domain.clone().or_else(|| data.corpus.domain.clone()),
        frequency: cfg.corpus.frequency.clone().or_else(|| data.corpus.frequency.clone()),
        channels: cfg.corpus.channels.or(data.corpus.channels),
    };
    m
}

#[derive(Clone, Debug, Serialize)]
pub struct TextRecord {
    pub channel: String,
    pub component: ComponentKind,
    pub signature: BehavioralSignature,
    pub text: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Textualized {
    pub dataset: String,
    pub split: Split,
    pub window: usize,
    pub origin: usize,
    pub corpus: String,
    pub records: Vec<TextRecord>,
}

/// Decomposes one window with the model's normalizer and decomposition and
/// renders the prompt texts each component would receive.
pub fn textualize(model: &Stella, data: &Dataset, channel_names: &[String], split: Split, window: usize) -> Result<Textualized> {
    let origins = crate::data::window_origins(data.bundle.range(split), data.seq_len, data.pred_len);
    let origin = *origins.get(window).ok_or_else(|| {
        Error::Config(format!("window {window} out of range; the {} split has {} windows", split.name(), origins.len()))
    })?;
    let batch = gather(&data.values, data.channels, &[origin], data.seq_len, data.pred_len)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, false, 0);
    let (xn, _) = model.revin.normalize(&ctx, ctx.constant(batch.x))?;
    let comps = if model.config.ablation.no_nstl {
        passthrough(&ctx, xn)
    } else {
        model.stl.forward(&ctx, xn)?
    };
    let mut records = Vec::new();
    let k = model.config.anchor.top_lags;
    let sigs: Vec<Vec<BehavioralSignature>> = comps
        .as_array()
        .iter()
        .map(|v| window_signatures(&v.value(), k))
        .collect::<Result<_>>()?;
    for (c, name) in channel_names.iter().enumerate().take(data.channels) {
        for kind in ComponentKind::ALL {
            let sig = sigs[kind.index()][c].clone();
            records.push(TextRecord {
                channel: name.clone(),
                component: kind,
                text: render_fbp_text(&sig, kind),
                signature: sig,
            });
        }
    }
    Ok(Textualized {
        dataset: data.name.clone(),
        split,
        window,
        origin,
        corpus: model.corpus_text(),
        records,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub dataset: String,
    pub eval_dataset: String,
    pub seed: u64,
    pub variant: String,
    pub outcome: TrainOutcome,
    pub val: MetricReport,
    pub test: MetricReport,
    pub naive_test: MetricReport,
}

fn datasets_for(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (s, h) = (cfg.model.seq_len, cfg.model.pred_len);
    let load = |name: &str| -> Result<Dataset> {
        let dc = DataConfig {
            dataset: name.to_string(),
            ..cfg.data.clone()
        };
        prepare_dataset(&load_table(&dc, cfg.seed)?, s, h)
    };
    match &cfg.train.mode {
        TrainMode::Standard => Ok((load(&cfg.data.dataset)?, None)),
        TrainMode::FewShot { fraction } => Ok((load(&cfg.data.dataset)?.few_shot(*fraction)?, None)),
        TrainMode::ZeroShot { source, target } => {
            let src = load(source)?;
            let tgt = load(target)?;
            if src.channels != tgt.channels {
                return Err(Error::Config(format!(
                    "zero-shot source {source} has {} channels, target {target} has {}",
                    src.channels, tgt.channels
                )));
            }
            Ok((src, Some(tgt)))
        }
    }
}

fn variant_name(m: &ModelConfig) -> String {
    Variant::ALL
        .iter()
        .find(|v| v.ablation() == m.ablation)
        .map_or_else(|| "custom".to_string(), |v| v.name().to_string())
}

/// Trains one model per the config and scores it on the held-out split.
pub fn run(cfg: &RunConfig) -> Result<(Stella, RunSummary)> {
    let cfg = cfg.clone().seeded();
    cfg.validate()?;
    let (data, target) = datasets_for(&cfg)?;
    let mut model = Stella::new(model_config_for(&cfg.model, &data), cfg.seed)?;
    let outcome = train(&mut model, &data, &cfg.train)?;
    let eval_data = target.as_ref().unwrap_or(&data);
    let bs = cfg.train.batch_size;
    let val = evaluate(&model, &data, Split::Val, bs, "val")?;
    let test = evaluate(&model, eval_data, Split::Test, bs, "test")?;
    let naive_test = naive_report(eval_data, Split::Test)?;
    let summary = RunSummary {
        dataset: data.name.clone(),
        eval_dataset: eval_data.name.clone(),
        seed: cfg.seed,
        variant: variant_name(&cfg.model),
        outcome,
        val,
        test,
        naive_test,
    };
    Ok((model, summary))
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub best_epoch: usize,
    pub epochs: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub dataset: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

/// The full model and each single-module ablation under one seed, full first.
pub fn ablate(cfg: &RunConfig) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut dataset = String::new();
    for v in Variant::ALL {
        let mut c = cfg.clone();
        c.model.ablation = v.ablation();
        let (_, s) = run(&c)?;
        dataset = s.eval_dataset.clone();
        let mut report = s.test;
        report.label = v.name().to_string();
        rows.push(AblationRow {
            variant: v.name().to_string(),
            best_epoch: s.outcome.best_epoch,
            epochs: s.outcome.history.len(),
            report,
        });
    }
    Ok(AblationReport {
        dataset,
        seed: cfg.seed,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Fbp,
    Csp,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fbp" => Ok(SweepAxis::Fbp),
            "csp" => Ok(SweepAxis::Csp),
            _ => Err(Error::Config(format!("sweep axis must be fbp or csp, got {s:?}"))),
        }
    }

    pub fn default_values(self) -> &'static [usize] {
        match self {
            SweepAxis::Fbp => &[3, 6, 12, 24, 48],
            SweepAxis::Csp => &[1, 5, 10, 20, 40],
        }
    }

    fn apply(self, m: &mut ModelConfig, v: usize) {
        match self {
            SweepAxis::Fbp => m.anchor.fbp_len = Some(v),
            SweepAxis::Csp => m.anchor.csp_len = v,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub value: usize,
    pub sequence_len: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub dataset: String,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

/// One training run per prompt length on the chosen axis.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<SweepReport> {
    if values.is_empty() || values.contains(&0) {
        return Err(Error::Config("sweep values must be positive and non-empty".into()));
    }
    let mut points = Vec::new();
    let mut dataset = String::new();
    for &v in values {
        let mut c = cfg.clone();
        axis.apply(&mut c.model, v);
        let (model, s) = run(&c)?;
        dataset = s.eval_dataset.clone();
        let mut report = s.test;
        report.label = format!("{}={v}", if axis == SweepAxis::Fbp { "fbp" } else { "csp" });
        let layout = crate::anchor::Layout::plan(
            (!model.config.ablation.no_csp).then_some(model.anchor.config.csp_len),
            (!model.config.ablation.no_fbp).then_some(model.anchor.fbp_len),
            model.patches,
        );
        points.push(SweepPoint {
            value: v,
            sequence_len: layout.total,
            report,
        });
    }
    Ok(SweepReport {
        axis,
        dataset,
        seed: cfg.seed,
        points,
    })
}

pub const EMBEDDING_LABELS: [&str; 7] = ["trend", "seasonal", "residual", "csp", "fbp_T", "fbp_S", "fbp_R"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingRow {
    pub label: &'static str,
    pub sample: usize,
    pub origin: usize,
    pub values: Vec<f64>,
}

/// Mean over the channels of sample `b` and every token, `[B·C, T, D]` in.
fn pool(t: &Tensor, b: usize, channels: usize) -> Vec<f64> {
    let s = t.shape();
    let (tok, d) = (s[1], s[2]);
    let mut out = vec![0.0; d];
    for r in b * channels..(b + 1) * channels {
        for i in 0..tok {
            for (j, o) in out.iter_mut().enumerate() {
                *o += t.data()[(r * tok + i) * d + j];
            }
        }
    }
    let n = (channels * tok) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Pooled component embeddings and prompt vectors for the first `n`
/// windows of a split, one labeled row per sample and kind.
pub fn export_embeddings(model: &Stella, data: &Dataset, split: Split, n: usize) -> Result<Vec<EmbeddingRow>> {
    let origins: Vec<usize> = crate::data::window_origins(data.bundle.range(split), data.seq_len, data.pred_len)
        .into_iter()
        .take(n)
        .collect();
    if origins.is_empty() {
        return Err(Error::Data(format!("the {} split has no windows", split.name())));
    }
    let batch = gather(&data.values, data.channels, &origins, data.seq_len, data.pred_len)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, false, 0);
    let f = model.forward(&ctx, ctx.constant(batch.x))?;
    let mut sources: Vec<(&'static str, Tensor)> = Vec::new();
    for (k, e) in f.embeddings.iter().enumerate() {
        sources.push((EMBEDDING_LABELS[k], (*e.value()).clone()));
    }
    if let Some(c) = f.csp {
        sources.push(("csp", (*c.value()).clone()));
    }
    if let Some(fb) = f.fbp {
        for (k, p) in fb.iter().enumerate() {
            sources.push((EMBEDDING_LABELS[4 + k], (*p.value()).clone()));
        }
    }
    let mut rows = Vec::new();
    for (b, &origin) in origins.iter().enumerate() {
        for (label, t) in &sources {
            rows.push(EmbeddingRow {
                label,
                sample: b,
                origin,
                values: pool(t, b, data.channels),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct GateRecord {
    pub sample: usize,
    pub origin: usize,
    /// `[H][C][3]` weights of trend, seasonal and residual forecasts.
    pub gates: Vec<Vec<[f64; 3]>>,
}

#[derive(Clone, Debug)]
pub struct ForecastOutput {
    pub origins: Vec<usize>,
    /// `[B, H, C]` on the table's original scale.
    pub forecast: Tensor,
    pub gates: Vec<GateRecord>,
}

/// Forecasts the first `n` windows of a split.
pub fn forecast(model: &Stella, data: &Dataset, split: Split, n: usize) -> Result<ForecastOutput> {
    let origins: Vec<usize> = crate::data::window_origins(data.bundle.range(split), data.seq_len, data.pred_len)
        .into_iter()
        .take(n)
        .collect();
    if origins.is_empty() {
        return Err(Error::Data(format!("the {} split has no windows", split.name())));
    }
    let batch = gather(&data.values, data.channels, &origins, data.seq_len, data.pred_len)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, false, 0);
    let f = model.forward(&ctx, ctx.constant(batch.x))?;
    let mut out = (*f.output.value()).clone();
    data.scaler.inverse(out.data_mut());
    let g = f.gates.value();
    let (h, c) = (data.pred_len, data.channels);
    let gates = origins
        .iter()
        .enumerate()
        .map(|(b, &origin)| GateRecord {
            sample: b,
            origin,
            gates: (0..h)
                .map(|t| (0..c).map(|ch| [0, 1, 2].map(|k| g.at(&[b, t, ch, k]))).collect())
                .collect(),
        })
        .collect();
    Ok(ForecastOutput {
        origins,
        forecast: out,
        gates,
    })
}
