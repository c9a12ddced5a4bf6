//! The training setup used for the reaching benchmark.

use serde::{Deserialize, Serialize};

use super::{BenchConfig, Dataset};
use crate::model::{ModelConfig, OptimizerKind, PolicyModel, TrainConfig, TrainReport, Trainer};
use crate::rng::stream;
use crate::Result;

/// Model and optimizer settings for [`train_policy`]. The default is sized
/// to reach the benchmark's success target in minutes on one CPU core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TrainingRecipe {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                embed_dim: 32,
                heads: 2,
                ff_dim: 64,
                condition_slots: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                optimizer: OptimizerKind::Adam,
                learning_rate: 1e-2,
                batch_size: 16,
                steps: 3000,
                warmup_steps: 150,
                final_lr_fraction: 0.05,
                ..TrainConfig::default()
            },
        }
    }
}

impl TrainingRecipe {
    /// The model configuration with vocabulary, context and chunk sizes
    /// taken from the benchmark. The trailing condition slots are the two
    /// displacement tokens.
    pub fn model_config(&self, bench: &BenchConfig) -> ModelConfig {
        ModelConfig {
            num_classes: bench.num_bins,
            context_vocab: bench.context_bins,
            context_len: bench.context_len(),
            chunk_len: bench.chunk_len(),
            ..self.model.clone()
        }
    }
}

/// Initializes a policy from the `"init"` stream of `root_seed` and trains
/// it on the dataset's training split with the `"corruption"` stream.
pub fn train_policy(
    data: &Dataset,
    recipe: &TrainingRecipe,
    root_seed: u64,
    on_step: impl FnMut(usize, f64),
) -> Result<(PolicyModel, TrainReport)> {
    let mut model = PolicyModel::new(recipe.model_config(&data.config), &mut stream(root_seed, "init"))?;
    let items = data.batch_items()?;
    let mut trainer = Trainer::new(recipe.train.clone(), &model, stream(root_seed, "corruption"))?;
    let report = trainer.fit(&mut model, &items, on_step)?;
    Ok((model, report))
}
