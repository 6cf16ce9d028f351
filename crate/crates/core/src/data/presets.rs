use serde::Serialize;

use super::split::SplitMode;

/// Shape and conventions of a known benchmark table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub rows: usize,
    pub channels: usize,
    pub step_secs: i64,
    pub start: &'static str,
    pub domain: &'static str,
    pub split: SplitMode,
    /// Whether the published window counts leave room for the horizon.
    pub subtract_horizon: bool,
    pub seq_len: usize,
    pub pred_len: usize,
}

const ETT_CHANNELS: [&str; 7] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];

const RATIO_712: SplitMode = SplitMode::Ratio {
    train: 0.7,
    val: 0.1,
    test: 0.2,
};

const PRESETS: &[DatasetPreset] = &[
    DatasetPreset {
        name: "ETTh1",
        rows: 17_420,
        channels: 7,
        step_secs: 3_600,
        start: "2016-07-01 00:00:00",
        domain: "Temperature",
        split: SplitMode::EttMonths,
        subtract_horizon: false,
        seq_len: 96,
        pred_len: 96,
    },
    DatasetPreset {
        name: "ETTh2",
        rows: 17_420,
        channels: 7,
        step_secs: 3_600,
        start: "2016-07-01 00:00:00",
        domain: "Temperature",
        split: SplitMode::EttMonths,
        subtract_horizon: false,
        seq_len: 96,
        pred_len: 96,
    },
    DatasetPreset {
        name: "ETTm1",
        rows: 69_680,
        channels: 7,
        step_secs: 900,
        start: "2016-07-01 00:00:00",
        domain: "Temperature",
        split: SplitMode::EttMonths,
        subtract_horizon: false,
        seq_len: 96,
        pred_len: 96,
    },
    DatasetPreset {
        name: "ETTm2",
        rows: 69_680,
        channels: 7,
        step_secs: 900,
        start: "2016-07-01 00:00:00",
        domain: "Temperature",
        split: SplitMode::EttMonths,
        subtract_horizon: false,
        seq_len: 96,
        pred_len: 96,
    },
    DatasetPreset {
        name: "weather",
        rows: 52_696,
        channels: 21,
        step_secs: 600,
        start: "2020-01-01 00:10:00",
        domain: "Weather",
        split: RATIO_712,
        subtract_horizon: false,
        seq_len: 96,
        pred_len: 96,
    },
    DatasetPreset {
        name: "exchange_rate",
        rows: 7_588,
        channels: 8,
        step_secs: 86_400,
        start: "1990-01-01 00:00:00",
        domain: "Finance",
        split: RATIO_712,
        subtract_horizon: true,
        seq_len: 96,
        pred_len: 96,
    },
    DatasetPreset {
        name: "national_illness",
        rows: 966,
        channels: 7,
        step_secs: 7 * 86_400,
        start: "2002-01-01 00:00:00",
        domain: "Health",
        split: RATIO_712,
        subtract_horizon: true,
        seq_len: 36,
        pred_len: 24,
    },
];

impl DatasetPreset {
    pub fn all() -> &'static [DatasetPreset] {
        PRESETS
    }

    /// Looks a preset up by name or file stem, ignoring case.
    pub fn find(name: &str) -> Option<DatasetPreset> {
        let stem = std::path::Path::new(name)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(name)
            .to_ascii_lowercase();
        let alias = match stem.as_str() {
            "exchange" => "exchange_rate",
            "illness" | "ili" => "national_illness",
            s => s,
        }
        .to_string();
        PRESETS.iter().find(|p| p.name.to_ascii_lowercase() == alias).cloned()
    }

    pub fn channel_names(&self) -> Vec<String> {
        if self.channels == ETT_CHANNELS.len() && self.name.starts_with("ETT") {
            ETT_CHANNELS.iter().map(|s| s.to_string()).collect()
        } else {
            let mut v: Vec<String> = (0..self.channels - 1).map(|i| format!("x{i}")).collect();
            v.push("OT".into());
            v
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_by_stem() {
        assert_eq!(DatasetPreset::find("data/ETTh1.csv").unwrap().name, "ETTh1");
        assert_eq!(DatasetPreset::find("WEATHER").unwrap().channels, 21);
        assert_eq!(DatasetPreset::find("illness").unwrap().seq_len, 36);
        assert!(DatasetPreset::find("electricity").is_none());
    }
}
