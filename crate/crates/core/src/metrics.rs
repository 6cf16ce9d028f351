//! Point-forecast error metrics and the seasonally adjusted naive reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Critical value of the 90% one-sided seasonality test.
pub const SEASONALITY_Z: f64 = 1.645;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub mse: f64,
    pub mae: f64,
    /// Percent, in `[0, 200]`.
    pub smape: f64,
    /// Percent over the terms with nonzero truth.
    pub mape: f64,
    /// Number of MAPE terms skipped because the truth was zero.
    pub mape_skipped: usize,
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: vec![y.len()],
            rhs: vec![yhat.len()],
        });
    }
    if y.is_empty() {
        return Err(Error::invalid("metrics of an empty forecast"));
    }
    Ok(())
}

fn smape_term(y: f64, f: f64) -> f64 {
    let d = y.abs() + f.abs();
    if d == 0.0 {
        0.0
    } else {
        (y - f).abs() / d
    }
}

/// MSE, MAE, sMAPE and MAPE averaged over every element.
pub fn point_metrics(y: &[f64], yhat: &[f64]) -> Result<PointMetrics> {
    check_pair(y, yhat)?;
    let n = y.len() as f64;
    let mut m = PointMetrics::default();
    let mut mape_sum = 0.0;
    for (&a, &f) in y.iter().zip(yhat) {
        let e = a - f;
        m.mse += e * e;
        m.mae += e.abs();
        m.smape += smape_term(a, f);
        if a == 0.0 {
            m.mape_skipped += 1;
        } else {
            mape_sum += e.abs() / a.abs();
        }
    }
    m.mse /= n;
    m.mae /= n;
    m.smape *= 200.0 / n;
    let kept = y.len() - m.mape_skipped;
    m.mape = if kept > 0 { 100.0 * mape_sum / kept as f64 } else { 0.0 };
    if m.mape_skipped > 0 {
        log::warn!("MAPE skipped {} zero-valued targets", m.mape_skipped);
    }
    Ok(m)
}

/// In-sample mean absolute seasonal-naive error, the MASE scale.
pub fn seasonal_naive_scale(history: &[f64], s: usize) -> Result<f64> {
    if s == 0 || history.len() <= s {
        return Err(Error::invalid(format!(
            "MASE needs history longer than the seasonality {s}, got {}",
            history.len()
        )));
    }
    let d: f64 = (s..history.len()).map(|j| (history[j] - history[j - s]).abs()).sum();
    let scale = d / (history.len() - s) as f64;
    if scale == 0.0 {
        return Err(Error::Undefined("MASE scale is zero: the history repeats exactly at the seasonal lag".into()));
    }
    Ok(scale)
}

pub fn mase(y: &[f64], yhat: &[f64], history: &[f64], s: usize) -> Result<f64> {
    check_pair(y, yhat)?;
    let scale = seasonal_naive_scale(history, s)?;
    let mae: f64 = y.iter().zip(yhat).map(|(a, f)| (a - f).abs()).sum::<f64>() / y.len() as f64;
    Ok(mae / scale)
}

pub fn owa(smape: f64, mase: f64, smape_ref: f64, mase_ref: f64) -> Result<f64> {
    if smape_ref <= 0.0 || mase_ref <= 0.0 {
        return Err(Error::Undefined(format!(
            "OWA reference values must be positive, got sMAPE {smape_ref} and MASE {mase_ref}"
        )));
    }
    Ok(0.5 * (smape / smape_ref + mase / mase_ref))
}

/// Sample autocorrelation at `lag` with the usual biased normalization.
pub fn acf(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    if lag >= n {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let den: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    if den == 0.0 {
        return 0.0;
    }
    let num: f64 = (lag..n).map(|t| (x[t] - m) * (x[t - lag] - m)).sum();
    num / den
}

/// Whether the lag-`s` autocorrelation is significant at the 90% level.
pub fn seasonality_test(x: &[f64], s: usize) -> bool {
    if s <= 1 || x.len() < 2 * s {
        return false;
    }
    let sum_sq: f64 = (1..s).map(|i| acf(x, i).powi(2)).sum();
    let limit = SEASONALITY_Z * ((1.0 + 2.0 * sum_sq) / x.len() as f64).sqrt();
    acf(x, s).abs() > limit
}

/// Multiplicative seasonal indices (mean 1) by position `t mod s`, from the
/// ratio of each point to its centered moving average.
pub fn seasonal_indices(x: &[f64], s: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if s < 2 || n < 2 * s {
        return Err(Error::invalid(format!("seasonal decomposition needs two full cycles of {s}")));
    }
    // Centered moving average; a 2×s average when s is even.
    let half = s / 2;
    let mut ratio_sum = vec![0.0; s];
    let mut ratio_n = vec![0usize; s];
    for t in half..n - half {
        let ma = if s % 2 == 1 {
            x[t - half..=t + half].iter().sum::<f64>() / s as f64
        } else {
            let inner: f64 = x[t - half + 1..t + half].iter().sum();
            (0.5 * x[t - half] + inner + 0.5 * x[t + half]) / s as f64
        };
        if ma == 0.0 {
            return Err(Error::Undefined(format!("moving average is zero at {t}")));
        }
        ratio_sum[t % s] += x[t] / ma;
        ratio_n[t % s] += 1;
    }
    let mut idx: Vec<f64> = ratio_sum.iter().zip(&ratio_n).map(|(s, n)| s / *n as f64).collect();
    let mean = idx.iter().sum::<f64>() / s as f64;
    if mean == 0.0 || !mean.is_finite() {
        return Err(Error::Undefined("seasonal indices do not normalize".into()));
    }
    idx.iter_mut().for_each(|v| *v /= mean);
    Ok(idx)
}

/// Naive2 forecast of `horizon` steps: naive on the seasonally adjusted
/// series when the seasonality test passes, plain naive otherwise.
pub fn naive2(history: &[f64], horizon: usize, s: usize) -> Result<Vec<f64>> {
    let last = *history.last().ok_or_else(|| Error::invalid("naive2 of an empty history"))?;
    if !seasonality_test(history, s) {
        return Ok(vec![last; horizon]);
    }
    let idx = match seasonal_indices(history, s) {
        Ok(i) if i.iter().all(|v| *v != 0.0 && v.is_finite()) => i,
        _ => return Ok(vec![last; horizon]),
    };
    let n = history.len();
    let level = last / idx[(n - 1) % s];
    Ok((0..horizon).map(|h| level * idx[(n + h) % s]).collect())
}

/// Last observed value repeated.
pub fn naive_last(history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let last = *history.last().ok_or_else(|| Error::invalid("naive forecast of an empty history"))?;
    Ok(vec![last; horizon])
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mse: Vec<f64>,
    pub mae: Vec<f64>,
    pub smape: Vec<f64>,
}

/// Aggregate and per-horizon metrics for one evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    /// Forecast elements (or series, for M4 evaluations) aggregated.
    pub count: usize,
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mape: f64,
    pub mape_skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mase: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub owa: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seasonality: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_horizon: Option<HorizonMetrics>,
}

impl MetricReport {
    /// Metrics of `[B, H, C]` forecasts against targets of the same shape.
    pub fn from_windows(label: &str, y: &Tensor, yhat: &Tensor) -> Result<Self> {
        if y.shape() != yhat.shape() || y.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "metric report",
                lhs: y.shape().to_vec(),
                rhs: yhat.shape().to_vec(),
            });
        }
        let pm = point_metrics(y.data(), yhat.data())?;
        let (b, h, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
        let mut ph = HorizonMetrics::default();
        for step in 0..h {
            let mut ys = Vec::with_capacity(b * c);
            let mut fs = Vec::with_capacity(b * c);
            for bi in 0..b {
                for ci in 0..c {
                    ys.push(y.at(&[bi, step, ci]));
                    fs.push(yhat.at(&[bi, step, ci]));
                }
            }
            let m = point_metrics(&ys, &fs)?;
            ph.mse.push(m.mse);
            ph.mae.push(m.mae);
            ph.smape.push(m.smape);
        }
        Ok(Self {
            label: label.to_string(),
            count: y.numel(),
            mse: pm.mse,
            mae: pm.mae,
            smape: pm.smape,
            mape: pm.mape,
            mape_skipped: pm.mape_skipped,
            per_horizon: Some(ph),
            ..Default::default()
        })
    }

    pub fn all_finite(&self) -> bool {
        [self.mse, self.mae, self.smape, self.mape]
            .iter()
            .chain(self.mase.iter())
            .chain(self.owa.iter())
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// One univariate forecast with its history, for M4-style scoring.
pub struct SeriesForecast<'a> {
    pub history: &'a [f64],
    pub truth: &'a [f64],
    pub forecast: &'a [f64],
}

/// Series-averaged sMAPE and MASE, with OWA against Naive2 forecasts of the
/// same series.
pub fn evaluate_series(label: &str, items: &[SeriesForecast<'_>], s: usize) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::invalid("no series to evaluate"));
    }
    let (mut sm, mut ms, mut sm2, mut ms2, mut mse, mut mae, mut mape) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut skipped = 0;
    for it in items {
        let h = it.truth.len();
        let pm = point_metrics(it.truth, it.forecast)?;
        let ref_fc = naive2(it.history, h, s)?;
        let pm2 = point_metrics(it.truth, &ref_fc)?;
        sm += pm.smape;
        sm2 += pm2.smape;
        ms += mase(it.truth, it.forecast, it.history, s)?;
        ms2 += mase(it.truth, &ref_fc, it.history, s)?;
        mse += pm.mse;
        mae += pm.mae;
        mape += pm.mape;
        skipped += pm.mape_skipped;
    }
    let n = items.len() as f64;
    let (sm, ms, sm2, ms2) = (sm / n, ms / n, sm2 / n, ms2 / n);
    Ok(MetricReport {
        label: label.to_string(),
        count: items.len(),
        mse: mse / n,
        mae: mae / n,
        smape: sm,
        mape: mape / n,
        mape_skipped: skipped,
        mase: Some(ms),
        owa: Some(owa(sm, ms, sm2, ms2)?),
        seasonality: Some(s),
        per_horizon: None,
    })
}

/// Count-weighted average of group reports, for an overall row.
pub fn weighted_average(label: &str, reports: &[MetricReport]) -> Result<MetricReport> {
    let total: usize = reports.iter().map(|r| r.count).sum();
    if total == 0 {
        return Err(Error::invalid("nothing to average"));
    }
    let w = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(|r| f(r) * r.count as f64).sum::<f64>() / total as f64;
    let opt = |f: &dyn Fn(&MetricReport) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = reports.iter().map(f).collect();
        vals.map(|v| v.iter().zip(reports).map(|(x, r)| x * r.count as f64).sum::<f64>() / total as f64)
    };
    Ok(MetricReport {
        label: label.to_string(),
        count: total,
        mse: w(&|r| r.mse),
        mae: w(&|r| r.mae),
        smape: w(&|r| r.smape),
        mape: w(&|r| r.mape),
        mape_skipped: reports.iter().map(|r| r.mape_skipped).sum(),
        mase: opt(&|r| r.mase),
        owa: opt(&|r| r.owa),
        seasonality: None,
        per_horizon: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_forecast() {
        let y = [1.0, -2.0, 3.5];
        let m = point_metrics(&y, &y).unwrap();
        assert_eq!((m.mse, m.mae, m.smape, m.mape), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn smape_hand_value() {
        let m = point_metrics(&[100.0, 100.0], &[110.0, 90.0]).unwrap();
        let expect = 100.0 * (10.0 / 210.0 + 10.0 / 190.0);
        assert!((m.smape - expect).abs() < 1e-12);
        assert!((m.smape - 10.0251).abs() < 1e-4);
    }

    #[test]
    fn mse_mae_hand_value() {
        let m = point_metrics(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
    }

    #[test]
    fn zero_terms() {
        let m = point_metrics(&[0.0, 2.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m.mape_skipped, 1);
        assert!((m.mape - 50.0).abs() < 1e-12);
        assert!((m.smape - 100.0 * (1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn mase_scale() {
        assert_eq!(seasonal_naive_scale(&[0.0, 1.0, 2.0, 3.0], 1).unwrap(), 1.0);
        assert!(matches!(seasonal_naive_scale(&[2.0; 5], 1), Err(Error::Undefined(_))));
        assert!(seasonal_naive_scale(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn owa_values() {
        assert_eq!(owa(10.0, 2.0, 10.0, 2.0).unwrap(), 1.0);
        assert_eq!(owa(5.0, 1.0, 10.0, 2.0).unwrap(), 0.5);
        assert!(owa(1.0, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn naive2_branches() {
        let flat: Vec<f64> = (0..30).map(|t| 5.0 + 0.1 * t as f64).collect();
        assert_eq!(naive2(&flat, 4, 1).unwrap(), vec![flat[29]; 4]);
        assert_eq!(naive2(&[3.0; 50], 6, 12).unwrap(), vec![3.0; 6]);
        let cycle = [1.0, 3.0, 2.0, 5.0];
        let x: Vec<f64> = (0..40).map(|t| cycle[t % 4]).collect();
        let f = naive2(&x, 8, 4).unwrap();
        for (h, v) in f.iter().enumerate() {
            assert!((v - cycle[(40 + h) % 4]).abs() < 1e-9, "{h}: {v}");
        }
    }

    #[test]
    fn short_history_falls_back() {
        let x = [1.0, 4.0, 2.0, 5.0, 1.0];
        assert_eq!(naive2(&x, 3, 4).unwrap(), vec![1.0; 3]);
    }
}
