//! Table ingestion, chronological splits, and sliding windows.

mod m4;
mod presets;
mod split;
mod synth;
mod table;
mod windows;

pub use m4::{load_m4, M4Group, M4Series};
pub use presets::DatasetPreset;
pub use split::{chronological_split, window_count, Split, SplitBundle, SplitMode};
pub use synth::synth_table;
pub use table::{describe_period, infer_frequency, load_csv, parse_timestamp, write_csv, Scaler, SeriesTable};
pub use windows::{gather, iterate_windows, oversample, window_origins, WindowBatch, WindowStream};

use std::path::{Path, PathBuf};

use crate::error::Result;

/// Loads `<dir>/<preset>.csv` when it exists, otherwise the synthetic
/// stand-in with the same shape. The flag reports which one was used.
pub fn load_or_synthesize(dir: Option<&Path>, preset: &DatasetPreset, seed: u64) -> Result<(SeriesTable, bool)> {
    if let Some(d) = dir {
        let p: PathBuf = d.join(preset.file_name());
        if p.exists() {
            let mut t = load_csv(&p)?;
            t.domain_tag = Some(preset.domain.to_string());
            return Ok((t, true));
        }
    }
    Ok((synth_table(preset, seed)?, false))
}
