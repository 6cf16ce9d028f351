use std::path::Path;

use chrono::NaiveDateTime;
use serde::Serialize;

use crate::error::{Error, Result};

const TIME_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M:%S",
    "%Y/%m/%d %H:%M:%S",
    "%Y/%m/%d %H:%M",
];

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for f in TIME_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(t);
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .or_else(|_| chrono::NaiveDate::parse_from_str(s, "%Y/%m/%d"))
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// A complete, regularly indexed multivariate series, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    pub timestamps: Vec<NaiveDateTime>,
    values: Vec<f64>,
    pub channel_names: Vec<String>,
    /// Human-readable sampling period, e.g. "1 hour".
    pub frequency: Option<String>,
    /// Free-text domain description, e.g. "Temperature".
    pub domain_tag: Option<String>,
}

impl SeriesTable {
    pub fn new(timestamps: Vec<NaiveDateTime>, values: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        let c = channel_names.len();
        if c == 0 {
            return Err(Error::Data("table needs at least one channel".into()));
        }
        if values.len() != timestamps.len() * c {
            return Err(Error::Data(format!(
                "{} values do not fill {} rows of {c} channels",
                values.len(),
                timestamps.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in row {}", i / c)));
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Data(format!(
                    "timestamps not strictly increasing at row {}: {} after {}",
                    i + 1,
                    w[1],
                    w[0]
                )));
            }
        }
        let frequency = infer_frequency(&timestamps);
        Ok(Self {
            timestamps,
            values,
            channel_names,
            frequency,
            domain_tag: None,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    /// Row-major `N × C` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.channels();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn column(&self, ch: usize) -> Vec<f64> {
        self.values.iter().skip(ch).step_by(self.channels()).copied().collect()
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> SeriesTable {
        let n = n.min(self.len());
        let mut t = self.clone();
        t.timestamps.truncate(n);
        t.values.truncate(n * self.channels());
        t
    }

    /// Keeps only the named channels, in the given order.
    pub fn select(&self, names: &[String]) -> Result<SeriesTable> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.channel_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Data(format!("no channel named {n}")))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(self.len() * idx.len());
        for r in 0..self.len() {
            let row = self.row(r);
            values.extend(idx.iter().map(|&i| row[i]));
        }
        let mut t = SeriesTable::new(self.timestamps.clone(), values, names.to_vec())?;
        t.domain_tag = self.domain_tag.clone();
        Ok(t)
    }
}

/// Describes the median spacing of the timestamps.
pub fn infer_frequency(ts: &[NaiveDateTime]) -> Option<String> {
    if ts.len() < 2 {
        return None;
    }
    let mut d: Vec<i64> = ts.windows(2).map(|w| (w[1] - w[0]).num_seconds()).collect();
    d.sort_unstable();
    Some(describe_period(d[d.len() / 2]))
}

pub fn describe_period(secs: i64) -> String {
    let units = [(604_800, "week"), (86_400, "day"), (3_600, "hour"), (60, "minute"), (1, "second")];
    for (size, name) in units {
        if secs >= size && secs % size == 0 {
            let n = secs / size;
            if name == "week" {
                return format!("{} days", n * 7);
            }
            return if n == 1 { format!("1 {name}") } else { format!("{n} {name}s") };
        }
    }
    format!("{secs} seconds")
}

/// Reads a CSV with a header row whose first column holds timestamps.
/// Empty, `nan`, or non-numeric cells are rejected with their line number.
pub fn load_csv(path: &Path) -> Result<SeriesTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            msg: "need a timestamp column and at least one value column".into(),
        });
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| Error::Parse {
            line,
            msg: format!("unparseable timestamp {:?}", &rec[0]),
        })?;
        if let Some(prev) = timestamps.last() {
            if ts <= *prev {
                return Err(Error::Parse {
                    line,
                    msg: format!("timestamp {ts} does not increase over {prev}"),
                });
            }
        }
        timestamps.push(ts);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("column {} value {:?} is not a number", channel_names[j], cell),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("column {} is missing or non-finite", channel_names[j]),
                });
            }
            values.push(v);
        }
    }
    SeriesTable::new(timestamps, values, channel_names)
}

pub fn write_csv(table: &SeriesTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut header = vec!["date".to_string()];
    header.extend(table.channel_names.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for r in 0..table.len() {
        let mut rec = vec![table.timestamps[r].format("%Y-%m-%d %H:%M:%S").to_string()];
        rec.extend(table.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-channel standardization fitted on a row range.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(table: &SeriesTable, rows: std::ops::Range<usize>) -> Result<Self> {
        if rows.is_empty() || rows.end > table.len() {
            return Err(Error::Data(format!("cannot fit a scaler on rows {rows:?}")));
        }
        let c = table.channels();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; c];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(table.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(table.row(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Standardized copy of the table's row-major values.
    pub fn transform(&self, table: &SeriesTable) -> Vec<f64> {
        let c = table.channels();
        table
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect()
    }

    pub fn inverse(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
    }
}
