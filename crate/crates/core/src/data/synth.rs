//! Deterministic stand-ins shaped like the public benchmark tables, for
//! environments where the real files are not available.

use chrono::{Duration, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::presets::DatasetPreset;
use super::table::{parse_timestamp, SeriesTable};
use crate::error::{Error, Result};

/// Daily and weekly cycles, a slow drift, and AR(1) noise per channel, with
/// the last channel a noisy mix of the others.
pub fn synth_table(preset: &DatasetPreset, seed: u64) -> Result<SeriesTable> {
    let n = preset.rows;
    let c = preset.channels;
    let step = preset.step_secs;
    let start: NaiveDateTime = parse_timestamp(preset.start)
        .ok_or_else(|| Error::invalid(format!("bad preset start {}", preset.start)))?;
    let timestamps: Vec<NaiveDateTime> = (0..n).map(|i| start + Duration::seconds(i as i64 * step)).collect();
    let day = (86_400 / step).max(1) as f64;
    let week = (7 * 86_400 / step).max(1) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::numerics::name_hash(preset.name));
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(c);
    for ch in 0..c {
        let level = rng.gen_range(-5.0..15.0);
        let daily = rng.gen_range(0.5..3.0);
        let weekly = rng.gen_range(0.1..1.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let drift = rng.gen_range(-2.0..2.0) / n as f64;
        let wander = rng.gen_range(0.5..2.0);
        let noise = 0.15 * daily;
        let mut ar = 0.0;
        let mut col = Vec::with_capacity(n);
        for t in 0..n {
            let tf = t as f64;
            ar = 0.9 * ar + noise * unit.sample(&mut rng);
            let slow = wander * (std::f64::consts::TAU * tf / (day * 45.0) + ch as f64).sin();
            let v = level
                + drift * tf
                + slow
                + daily * (std::f64::consts::TAU * tf / day + phase).sin()
                + 0.3 * daily * (2.0 * std::f64::consts::TAU * tf / day + 2.0 * phase).cos()
                + weekly * (std::f64::consts::TAU * tf / week).sin()
                + ar;
            col.push(v);
        }
        cols.push(col);
    }
    if c > 1 {
        let mix: Vec<f64> = (0..c - 1).map(|_| rng.gen_range(-0.5..0.5)).collect();
        for t in 0..n {
            let s: f64 = (0..c - 1).map(|j| mix[j] * cols[j][t]).sum();
            cols[c - 1][t] = 0.5 * cols[c - 1][t] + s;
        }
    }
    let values: Vec<f64> = (0..n).flat_map(|t| cols.iter().map(move |col| col[t])).collect();
    let mut table = SeriesTable::new(timestamps, values, preset.channel_names())?;
    table.domain_tag = Some(preset.domain.to_string());
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let p = DatasetPreset::find("ETTh1").unwrap();
        let a = synth_table(&p, 0).unwrap();
        assert_eq!(a.len(), 17420);
        assert_eq!(a.channels(), 7);
        assert_eq!(a.frequency.as_deref(), Some("1 hour"));
        let b = synth_table(&p, 0).unwrap();
        assert_eq!(a, b);
    }
}
