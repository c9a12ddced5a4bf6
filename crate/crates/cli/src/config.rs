//! Run configuration: one TOML file, every section optional, unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use diffact_core::bench::{BenchConfig, TrainingRecipe};
use diffact_core::model::TrainConfig;
use diffact_core::{DecodeConfig, Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; data, init, corruption and decode streams derive from it.
    pub seed: u64,
    /// Tasks generated by `gen-data`.
    pub tasks: usize,
    /// Cap on evaluated held-out episodes; all of them when unset.
    pub episodes: Option<usize>,
    pub bench: BenchConfig,
    /// Vocabulary, context and chunk sizes are taken from `bench`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let recipe = TrainingRecipe::default();
        Self {
            seed: 0,
            tasks: 1000,
            episodes: None,
            bench: BenchConfig::default(),
            model: recipe.model,
            train: recipe.train,
            decode: DecodeConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn recipe(&self) -> TrainingRecipe {
        TrainingRecipe {
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bench.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.tasks == 0 {
            return Err(Error::Config("tasks must be at least 1".into()));
        }
        Ok(())
    }
}
