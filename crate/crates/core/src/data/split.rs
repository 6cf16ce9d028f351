use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::table::SeriesTable;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitMode {
    /// Fractions of the table; train and test are floored, val takes the rest.
    Ratio { train: f64, val: f64, test: f64 },
    /// 12/4/4 thirty-day months of points, for ETT-shaped tables.
    EttMonths,
}

impl Default for SplitMode {
    fn default() -> Self {
        SplitMode::Ratio {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Row ranges of each split. `val` and `test` start `lookback` rows early so
/// their first window has a full input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SplitBundle {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub lookback: usize,
}

impl SplitBundle {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Rows owned by each split, without the lookback prefix.
    pub fn owned(&self, split: Split) -> Range<usize> {
        let r = self.range(split);
        match split {
            Split::Train => r,
            _ => r.start + self.lookback..r.end,
        }
    }
}

fn floor_frac(n: usize, f: f64) -> usize {
    // Tolerate representation error such as 0.29 * 100 = 28.999999999999996.
    (n as f64 * f + 1e-9).floor() as usize
}

/// Points per thirty-day month from the table's median spacing.
fn points_per_month(table: &SeriesTable) -> Result<usize> {
    if table.len() < 2 {
        return Err(Error::Data("month-based split needs at least two rows".into()));
    }
    let mut d: Vec<i64> = table
        .timestamps
        .windows(2)
        .map(|w| (w[1] - w[0]).num_seconds())
        .collect();
    d.sort_unstable();
    let step = d[d.len() / 2];
    let month = 30 * 86_400;
    if step <= 0 || month % step != 0 {
        return Err(Error::Data(format!("spacing of {step}s does not divide a 30-day month")));
    }
    Ok((month / step) as usize)
}

/// Chronological train/val/test borders. Every segment, lookback included,
/// must hold at least one `seq_len + pred_len` window.
pub fn chronological_split(table: &SeriesTable, mode: SplitMode, seq_len: usize, pred_len: usize) -> Result<SplitBundle> {
    let n = table.len();
    let (n_train, n_val, n_test) = match mode {
        SplitMode::Ratio { train, val, test } => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) || ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("split ratios {train}/{val}/{test} must be in [0,1] and sum to 1")));
            }
            let tr = floor_frac(n, train);
            let te = floor_frac(n, test);
            (tr, n - tr - te, te)
        }
        SplitMode::EttMonths => {
            let m = points_per_month(table)?;
            let (tr, va, te) = (12 * m, 4 * m, 4 * m);
            if tr + va + te > n {
                return Err(Error::Data(format!("month split needs {} rows, table has {n}", tr + va + te)));
            }
            (tr, va, te)
        }
    };
    let val_start = n_train;
    let test_start = n_train + n_val;
    let test_end = test_start + n_test;
    if val_start < seq_len {
        return Err(Error::Data(format!("training segment of {n_train} rows is shorter than the lookback {seq_len}")));
    }
    let bundle = SplitBundle {
        train: 0..n_train,
        val: val_start - seq_len..test_start,
        test: test_start - seq_len..test_end,
        lookback: seq_len,
    };
    for s in Split::ALL {
        let len = bundle.range(s).len();
        if len < seq_len + pred_len {
            return Err(Error::Data(format!(
                "{} segment has {len} rows, fewer than input {seq_len} + horizon {pred_len}",
                s.name()
            )));
        }
    }
    Ok(bundle)
}

/// Number of windows in a segment of `len` rows: `len − S + 1`, or
/// `len − S − H + 1` when the horizon is subtracted.
pub fn window_count(len: usize, seq_len: usize, subtract_horizon: bool, pred_len: usize) -> Result<usize> {
    let need = seq_len + if subtract_horizon { pred_len } else { 0 };
    if len < need {
        return Err(Error::Data(format!("segment of {len} rows holds no window of {need} rows")));
    }
    Ok(len + 1 - need)
}
