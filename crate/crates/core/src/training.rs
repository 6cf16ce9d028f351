//! Losses, the learning-rate schedule, Adam, and the epoch loop with early
//! stopping.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchor::CorpusMeta;
use crate::data::{chronological_split, iterate_windows, window_origins, Scaler, SeriesTable, Split, SplitBundle, SplitMode, WindowStream};
use crate::error::{Error, Result};
use crate::metrics::{naive_last, MetricReport};
use crate::model::Stella;
use crate::numerics::{Ctx, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mae,
    #[default]
    Mse,
    Smape,
}

/// Mean loss over every element. sMAPE terms whose truth and forecast are
/// both zero count as zero.
pub fn loss<'t>(pred: Var<'t>, target: Var<'t>, kind: LossKind) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: pred.shape(),
            rhs: target.shape(),
        });
    }
    let diff = pred.sub(target)?;
    Ok(match kind {
        LossKind::Mse => diff.square().mean(),
        LossKind::Mae => diff.abs().mean(),
        LossKind::Smape => {
            let den = pred.abs().add(target.abs())?;
            let guard = den.value().map(|d| if d == 0.0 { 1.0 } else { 0.0 });
            let den = den.add(pred.tape().constant(guard))?;
            diff.abs().div(den)?.mean().scale(200.0)
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainMode {
    Standard,
    /// Train on the leading `fraction` of the training segment.
    FewShot { fraction: f64 },
    /// Train on `source`, evaluate on `target`.
    ZeroShot { source: String, target: String },
}

impl Default for TrainMode {
    fn default() -> Self {
        TrainMode::Standard
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Cap on optimizer steps per epoch.
    pub max_train_batches: Option<usize>,
    /// Cap on validation batches per epoch.
    pub max_val_batches: Option<usize>,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mse,
            lr: 1e-3,
            warmup_epochs: 4,
            decay: 0.9,
            max_epochs: 100,
            patience: 5,
            batch_size: 32,
            seed: 2024,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_train_batches: None,
            max_val_batches: None,
            mode: TrainMode::Standard,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.warmup_epochs >= self.max_epochs {
            return Err(Error::Config(format!(
                "warmup epochs ({}) must be fewer than max epochs ({})",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if !(self.lr > 0.0) || !(self.decay > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate, decay and batch size must be positive".into()));
        }
        if let TrainMode::FewShot { fraction } = self.mode {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!("few-shot fraction {fraction} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Linear ramp from `lr/100` to `lr` over the warmup epochs, then
/// exponential decay.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let start = cfg.lr / 100.0;
    if epoch < cfg.warmup_epochs {
        start + (cfg.lr - start) * epoch as f64 / cfg.warmup_epochs as f64
    } else {
        cfg.lr * cfg.decay.powi((epoch - cfg.warmup_epochs) as i32)
    }
}

/// Adam over the trainable parameters of one store.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments.get(&id)
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads {
            if store.get(*id).frozen {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.value_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// A standardized table with its chronological splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    /// Row-major, standardized with statistics of the training rows.
    pub values: Vec<f64>,
    pub channels: usize,
    pub bundle: SplitBundle,
    pub seq_len: usize,
    pub pred_len: usize,
    pub scaler: Scaler,
    pub corpus: CorpusMeta,
}

impl Dataset {
    pub fn prepare(name: &str, table: &SeriesTable, mode: SplitMode, seq_len: usize, pred_len: usize) -> Result<Self> {
        let bundle = chronological_split(table, mode, seq_len, pred_len)?;
        let scaler = Scaler::fit(table, bundle.train.clone())?;
        Ok(Self {
            name: name.to_string(),
            values: scaler.transform(table),
            channels: table.channels(),
            bundle,
            seq_len,
            pred_len,
            scaler,
            corpus: CorpusMeta {
                domain: table.domain_tag.clone(),
                frequency: table.frequency.clone(),
                channels: Some(table.channels()),
            },
        })
    }

    /// Keeps only the leading `fraction` of the training segment.
    pub fn few_shot(mut self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("few-shot fraction {fraction} not in (0, 1]")));
        }
        let len = self.bundle.train.len();
        let keep = ((len as f64 * fraction) + 1e-9).floor() as usize;
        if keep < self.seq_len + self.pred_len {
            return Err(Error::Data(format!(
                "{:.0}% of the training segment is {keep} rows, fewer than one window",
                fraction * 100.0
            )));
        }
        self.bundle.train = self.bundle.train.start..self.bundle.train.start + keep;
        Ok(self)
    }

    pub fn windows(&self, split: Split, batch: usize, shuffle: Option<u64>) -> Result<WindowStream<'_>> {
        iterate_windows(&self.values, self.channels, &self.bundle, split, self.seq_len, self.pred_len, batch, shuffle)
    }

    pub fn window_count(&self, split: Split) -> usize {
        window_origins(self.bundle.range(split), self.seq_len, self.pred_len).len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub steps: u64,
}

fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ ((epoch as u64) << 32 | batch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn diverged(model: &Stella, epoch: usize, batch: usize, value: f64) -> Error {
    let mut norms: Vec<(String, f64)> = model
        .store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    norms.truncate(5);
    let listed: Vec<String> = norms.iter().map(|(n, v)| format!("{n}={v:.3e}")).collect();
    Error::Diverged(format!(
        "loss {value} at epoch {epoch}, batch {batch}; largest parameter norms: {}",
        listed.join(", ")
    ))
}

/// One optimizer step on a batch; returns the loss before the update.
pub fn train_step(
    model: &mut Stella,
    adam: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    cfg: &TrainConfig,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let (value, mut grads) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store, true, seed);
        let f = model.forward(&ctx, ctx.constant(x.clone()))?;
        let l = loss(f.output, ctx.constant(y.clone()), cfg.loss)?;
        let value = l.value().data()[0];
        if !value.is_finite() {
            return Ok(value);
        }
        (value, ctx.param_grads(l)?)
    };
    clip_global_norm(&mut grads, cfg.clip_norm);
    adam.update(&mut model.store, &grads, lr)?;
    Ok(value)
}

/// Mean loss over one split in evaluation mode.
pub fn split_loss(model: &Stella, data: &Dataset, split: Split, cfg: &TrainConfig, max_batches: Option<usize>) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for b in data.windows(split, cfg.batch_size, None)?.take(max_batches.unwrap_or(usize::MAX)) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store, false, 0);
        let f = model.forward(&ctx, ctx.constant(b.x))?;
        let l = loss(f.output, ctx.constant(b.y), cfg.loss)?;
        let count = b.origins.len();
        total += l.value().data()[0] * count as f64;
        n += count;
    }
    if n == 0 {
        return Err(Error::Data(format!("{} split has no windows", split.name())));
    }
    Ok(total / n as f64)
}

/// Trains with early stopping on validation loss and leaves the best
/// parameters in `model`.
pub fn train(model: &mut Stella, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.channels != model.config.channels || data.seq_len != model.config.seq_len || data.pred_len != model.config.pred_len {
        return Err(Error::Config(format!(
            "data is C={} S={} H={}, model expects C={} S={} H={}",
            data.channels, data.seq_len, data.pred_len, model.config.channels, model.config.seq_len, model.config.pred_len
        )));
    }
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.store.clone());
    let mut bad_epochs = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        let (mut total, mut n) = (0.0, 0usize);
        let stream = data.windows(Split::Train, cfg.batch_size, Some(cfg.seed.wrapping_add(epoch as u64)))?;
        for (i, b) in stream.take(cfg.max_train_batches.unwrap_or(usize::MAX)).enumerate() {
            let v = train_step(model, &mut adam, &b.x, &b.y, cfg, lr, step_seed(cfg.seed, epoch, i))?;
            if !v.is_finite() {
                return Err(diverged(model, epoch, i, v));
            }
            total += v * b.origins.len() as f64;
            n += b.origins.len();
        }
        let train_loss = total / n.max(1) as f64;
        let val_loss = split_loss(model, data, Split::Val, cfg, cfg.max_val_batches)?;
        log::info!("epoch {epoch}: lr {lr:.3e} train {train_loss:.5} val {val_loss:.5}");
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.store.clone());
            bad_epochs = 0;
        } else if epoch >= cfg.warmup_epochs {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val, best_epoch, store) = best;
    model.store = store;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val,
        stopped_early,
        steps: adam.step,
    })
}

/// Forecasts and targets of every window of a split, stacked on the batch axis.
pub fn collect_forecasts(model: &Stella, data: &Dataset, split: Split, batch: usize) -> Result<(Tensor, Tensor)> {
    let (mut ys, mut fs, mut b_total) = (Vec::new(), Vec::new(), 0);
    for b in data.windows(split, batch, None)? {
        let f = model.predict(&b.x)?;
        b_total += b.origins.len();
        ys.extend_from_slice(b.y.data());
        fs.extend_from_slice(f.data());
    }
    let shape = [b_total, data.pred_len, data.channels];
    Ok((Tensor::new(&shape, ys)?, Tensor::new(&shape, fs)?))
}

pub fn evaluate(model: &Stella, data: &Dataset, split: Split, batch: usize, label: &str) -> Result<MetricReport> {
    let (y, f) = collect_forecasts(model, data, split, batch)?;
    MetricReport::from_windows(label, &y, &f)
}

/// Repeat-last-value forecasts for every window of a split.
pub fn naive_report(data: &Dataset, split: Split) -> Result<MetricReport> {
    let (mut ys, mut fs, mut n) = (Vec::new(), Vec::new(), 0);
    let c = data.channels;
    for b in data.windows(split, 256, None)? {
        let (bs, s, h) = (b.origins.len(), data.seq_len, data.pred_len);
        let mut f = vec![0.0; bs * h * c];
        for bi in 0..bs {
            for ci in 0..c {
                let hist: Vec<f64> = (0..s).map(|t| b.x.at(&[bi, t, ci])).collect();
                for (t, v) in naive_last(&hist, h)?.into_iter().enumerate() {
                    f[(bi * h + t) * c + ci] = v;
                }
            }
        }
        ys.extend_from_slice(b.y.data());
        fs.extend(f);
        n += bs;
    }
    let shape = [n, data.pred_len, c];
    MetricReport::from_windows("naive_last", &Tensor::new(&shape, ys)?, &Tensor::new(&shape, fs)?)
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
