use std::collections::BTreeMap;
use std::path::Path;

use joadaa_core::eval::{AblationBase, AblationCell, DEFAULT_HORIZONS};
use joadaa_core::memory::MemoryConfig;
use joadaa_core::model::ModelConfig;
use joadaa_core::synth::DatasetConfig;
use joadaa_core::train::TrainConfig;
use joadaa_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::ModelOverrides;

/// Contents of a `--config` file after defaults and flag overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    /// Generated in memory before the grid runs.
    pub datasets: BTreeMap<String, DatasetConfig>,
    pub cells: Vec<AblationCell>,
}

fn default_horizons() -> Vec<usize> {
    DEFAULT_HORIZONS.to_vec()
}

impl RunConfig {
    /// Parses a config file. Missing `[model]` dimensions are taken from
    /// `fill` as `(feature_dim, num_classes)`.
    pub fn load(path: &Path, fill: Option<(usize, usize)>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, fill)
    }

    pub fn parse(text: &str, fill: Option<(usize, usize)>) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_error)?;
        if let Some((features, classes)) = fill {
            let model = table
                .entry("model")
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(model) = model {
                model
                    .entry("feature_dim")
                    .or_insert(toml::Value::Integer(features as i64));
                model
                    .entry("num_classes")
                    .or_insert(toml::Value::Integer(classes as i64));
            }
        }
        let cfg: RunConfig = table.try_into().map_err(config_error)?;
        cfg.model.validate()?;
        cfg.memory.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<&DatasetConfig> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::Config("missing `[dataset]` table".into()))
    }

    pub fn ablation(&self) -> Result<&AblationConfig> {
        self.ablation
            .as_ref()
            .ok_or_else(|| Error::Config("missing `[ablation]` table".into()))
    }

    pub fn apply(&mut self, o: &ModelOverrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(mode) = o.memory_mode {
            self.model.memory_mode = mode;
        }
        if let Some(head) = o.head {
            self.model.online_head = head;
        }
        if o.no_anticipation {
            self.model.anticipation_horizon = 0;
            self.train.loss_weights[1] = 0.0;
        }
    }

    pub fn ablation_base(&self) -> AblationBase {
        AblationBase {
            model: self.model.clone(),
            memory: self.memory,
            train: self.train.clone(),
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim_end().to_string())
}
