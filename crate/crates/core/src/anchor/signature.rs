use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized-slope magnitude where a trend stops being "stable".
pub const SLIGHT_SLOPE: f64 = 0.05;
/// Normalized-slope magnitude where a trend becomes "strong".
pub const STRONG_SLOPE: f64 = 0.25;
/// Correlations closer than this count as tied; the smaller lag wins.
pub const LAG_TIE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendCategory {
    StronglyDecreasing,
    SlightlyDecreasing,
    Stable,
    SlightlyIncreasing,
    StronglyIncreasing,
}

impl TrendCategory {
    pub fn label(self) -> &'static str {
        match self {
            TrendCategory::StronglyDecreasing => "strongly decreasing",
            TrendCategory::SlightlyDecreasing => "slightly decreasing",
            TrendCategory::Stable => "stable",
            TrendCategory::SlightlyIncreasing => "slightly increasing",
            TrendCategory::StronglyIncreasing => "strongly increasing",
        }
    }

    /// Category of a slope expressed per window, `slope · S / (max − min)`.
    pub fn from_normalized_slope(s: f64) -> Self {
        if s <= -STRONG_SLOPE {
            TrendCategory::StronglyDecreasing
        } else if s <= -SLIGHT_SLOPE {
            TrendCategory::SlightlyDecreasing
        } else if s < SLIGHT_SLOPE {
            TrendCategory::Stable
        } else if s < STRONG_SLOPE {
            TrendCategory::SlightlyIncreasing
        } else {
            TrendCategory::StronglyIncreasing
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagCorrelation {
    pub lag: usize,
    pub acf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehavioralSignature {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub var: f64,
    pub slope: f64,
    pub trend: TrendCategory,
    pub top_lags: Vec<LagCorrelation>,
}

/// Pearson correlation between `z[lag..]` and `z[..n-lag]`; `None` when
/// either side is constant.
pub fn lagged_correlation(z: &[f64], lag: usize) -> Option<f64> {
    let n = z.len();
    if lag == 0 || lag >= n {
        return None;
    }
    let a = &z[lag..];
    let b = &z[..n - lag];
    let m = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / m, b.iter().sum::<f64>() / m);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Largest lag considered, half the window, so every correlation uses at
/// least half the points.
pub fn max_lag(len: usize) -> usize {
    (len / 2).max(1).min(len.saturating_sub(1))
}

/// The `k` lags with the highest correlation; near-ties go to the smaller lag.
pub fn top_lags(z: &[f64], k: usize) -> Vec<LagCorrelation> {
    let mut cands: Vec<LagCorrelation> = (1..=max_lag(z.len()))
        .filter_map(|lag| lagged_correlation(z, lag).map(|acf| LagCorrelation { lag, acf }))
        .collect();
    let mut out = Vec::with_capacity(k);
    while out.len() < k && !cands.is_empty() {
        let mut best = 0;
        for (i, c) in cands.iter().enumerate().skip(1) {
            if c.acf > cands[best].acf + LAG_TIE_TOL {
                best = i;
            }
        }
        out.push(cands.remove(best));
    }
    out
}

pub fn extract_signature(z: &[f64], k: usize) -> Result<BehavioralSignature> {
    let n = z.len();
    if n < 3 {
        return Err(Error::invalid(format!("signature needs at least 3 points, got {n}")));
    }
    if k == 0 {
        return Err(Error::invalid("signature needs at least one lag"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("signature of a non-finite series".into()));
    }
    let nf = n as f64;
    let min = z.iter().copied().fold(f64::INFINITY, f64::min);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = (z.iter().sum::<f64>() / nf).clamp(min, max);
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
    let t_mean = (nf - 1.0) / 2.0;
    let (mut stz, mut stt) = (0.0, 0.0);
    for (t, v) in z.iter().enumerate() {
        let dt = t as f64 - t_mean;
        stz += dt * (v - mean);
        stt += dt * dt;
    }
    let range = max - min;
    if range == 0.0 {
        return Ok(BehavioralSignature {
            min,
            max,
            mean,
            var: 0.0,
            slope: 0.0,
            trend: TrendCategory::Stable,
            top_lags: Vec::new(),
        });
    }
    let slope = stz / stt;
    Ok(BehavioralSignature {
        min,
        max,
        mean,
        var,
        slope,
        trend: TrendCategory::from_normalized_slope(slope * nf / range),
        top_lags: top_lags(z, k),
    })
}
