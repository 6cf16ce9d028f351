use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::split::{Split, SplitBundle};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A batch of inputs `x: [B, S, C]` and the targets `y: [B, H, C]` that
/// directly follow them. `origins[i]` is the first row of window `i`'s input.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub origins: Vec<usize>,
}

/// Input start rows of every window whose input and target fit in `range`.
pub fn window_origins(range: Range<usize>, seq_len: usize, pred_len: usize) -> Vec<usize> {
    let need = seq_len + pred_len;
    if range.len() < need {
        return Vec::new();
    }
    (range.start..=range.end - need).collect()
}

/// Gathers windows at `origins` from row-major `data` with `channels` columns.
pub fn gather(data: &[f64], channels: usize, origins: &[usize], seq_len: usize, pred_len: usize) -> Result<WindowBatch> {
    let rows = data.len() / channels;
    let c = channels;
    let mut x = Vec::with_capacity(origins.len() * seq_len * c);
    let mut y = Vec::with_capacity(origins.len() * pred_len * c);
    for &o in origins {
        if o + seq_len + pred_len > rows {
            return Err(Error::Data(format!("window at row {o} runs past the {rows} available rows")));
        }
        x.extend_from_slice(&data[o * c..(o + seq_len) * c]);
        y.extend_from_slice(&data[(o + seq_len) * c..(o + seq_len + pred_len) * c]);
    }
    let b = origins.len();
    Ok(WindowBatch {
        x: Tensor::new(&[b, seq_len, c], x)?,
        y: Tensor::new(&[b, pred_len, c], y)?,
        origins: origins.to_vec(),
    })
}

/// Repeats `order` `factor` times, reshuffling each repetition when a seed
/// is given.
pub fn oversample(order: &[usize], factor: usize, seed: Option<u64>) -> Result<Vec<usize>> {
    if factor < 1 {
        return Err(Error::Config("oversampling factor must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(order.len() * factor);
    for rep in 0..factor {
        let mut chunk = order.to_vec();
        if let Some(s) = seed {
            chunk.shuffle(&mut ChaCha8Rng::seed_from_u64(s.wrapping_add(rep as u64 * 0x9e37_79b9)));
        }
        out.extend(chunk);
    }
    Ok(out)
}

/// Batches of windows in a fixed order.
pub struct WindowStream<'a> {
    data: &'a [f64],
    channels: usize,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    seq_len: usize,
    pred_len: usize,
}

impl<'a> WindowStream<'a> {
    pub fn from_order(
        data: &'a [f64],
        channels: usize,
        order: Vec<usize>,
        seq_len: usize,
        pred_len: usize,
        batch: usize,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            data,
            channels,
            order,
            pos: 0,
            batch,
            seq_len,
            pred_len,
        })
    }

    pub fn len_windows(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for WindowStream<'_> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let b = gather(self.data, self.channels, &self.order[self.pos..end], self.seq_len, self.pred_len)
            .expect("origins are validated against the split");
        self.pos = end;
        Some(b)
    }
}

/// Every window of one split, optionally shuffled with a seed.
#[allow(clippy::too_many_arguments)]
pub fn iterate_windows<'a>(
    data: &'a [f64],
    channels: usize,
    bundle: &SplitBundle,
    split: Split,
    seq_len: usize,
    pred_len: usize,
    batch: usize,
    shuffle: Option<u64>,
) -> Result<WindowStream<'a>> {
    let range = bundle.range(split);
    if range.end * channels > data.len() {
        return Err(Error::Data(format!("{} split extends past the data", split.name())));
    }
    let order = oversample(&window_origins(range, seq_len, pred_len), 1, shuffle)?;
    WindowStream::from_order(data, channels, order, seq_len, pred_len, batch)
}
