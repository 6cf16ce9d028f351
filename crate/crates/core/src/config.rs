//! Declarative run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SplitMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Preset name such as `ETTh1`, or a path to a CSV file.
    pub dataset: String,
    /// Directory searched for `<preset>.csv`; falls back to the
    /// `STELLA_DATA_DIR` environment variable.
    pub data_dir: Option<PathBuf>,
    /// Keep only the first `rows` points.
    pub rows: Option<usize>,
    /// Overrides the preset's split convention.
    pub split: Option<SplitMode>,
    /// Keep only these channels, in this order.
    pub channels: Option<Vec<String>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: "ETTh1".into(),
            data_dir: None,
            rows: None,
            split: None,
            channels: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// The only source of randomness: parameter init, shuffling, dropout and
    /// synthetic data all derive from it.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 2024,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Seeds every component from the run seed.
    pub fn seeded(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml("[model]\nbogus_knob = 3\n").unwrap_err().to_string();
        assert!(e.contains("bogus_knob"), "{e}");
        let e = RunConfig::from_toml("[train]\nlr = 0.1\nlearning_rate = 2\n").unwrap_err().to_string();
        assert!(e.contains("learning_rate"), "{e}");
    }

    #[test]
    fn nested_sections_parse() {
        let c = RunConfig::from_toml(
            "seed = 9\n[model.backbone]\nlayers = 1\n[model.anchor]\ncsp_len = 4\n[train]\nloss = \"mae\"\n[train.mode]\nkind = \"few_shot\"\nfraction = 0.1\n",
        )
        .unwrap();
        assert_eq!(c.model.backbone.layers, 1);
        assert_eq!(c.model.anchor.csp_len, 4);
        assert_eq!(c.train.mode, crate::training::TrainMode::FewShot { fraction: 0.1 });
        assert_eq!(c.seeded().train.seed, 9);
    }

    #[test]
    fn wrong_schema_rejected() {
        assert!(RunConfig::from_toml("schema_version = 2\n").is_err());
    }
}
