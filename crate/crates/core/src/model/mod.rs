//! Bidirectional transformer policy over `[context; action]` token sequences.
//!
//! Context tokens and action tokens (including `MASK`) are embedded, summed
//! with learned absolute position embeddings, and passed through pre-norm
//! transformer blocks with unmasked self-attention. A shared head projects
//! every action position to `K` logits; `MASK` is never predicted.

mod checkpoint;
mod gradcheck;
mod params;
mod train;
mod transformer;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{manifest_path, CheckpointManifest, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, Differentiable, GRAD_CHECK_FLOOR};
pub use params::TensorSpec;
pub use train::{
    BatchItem, CorruptionMode, GammaSampler, Optimizer, OptimizerKind, TrainConfig, TrainReport,
    Trainer,
};
pub use transformer::MaskedExample;

use crate::codec::{ActionChunk, TokenId};
use crate::rng::Rng;
use crate::{Error, Result};
use params::Layout;

/// Row-stochastic `L x K` matrix of per-position predictive distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

/// Tolerance on row sums accepted by [`PosteriorMatrix::validate`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

impl PosteriorMatrix {
    pub fn from_flat(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * classes {
            return Err(Error::Validation(format!(
                "{} values for a {rows}x{classes} posterior matrix",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            classes,
            data,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Validation("ragged posterior rows".into()));
        }
        let n = rows.len();
        Self::from_flat(n, classes, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Checks every row is a finite, non-negative distribution.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.rows {
            let row = self.row(i);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::ModelContract(format!(
                    "posterior row {i} has negative or non-finite entries"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::ModelContract(format!(
                    "posterior row {i} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Anything that maps `(context, partially masked chunk)` to per-position
/// posteriors. Implementations must be pure: identical inputs give identical
/// outputs.
pub trait PosteriorModel: Sync {
    fn num_classes(&self) -> usize;
    fn chunk_len(&self) -> usize;
    fn context_len(&self) -> usize;
    fn posteriors(&self, context: &[TokenId], actions: &[TokenId]) -> Result<PosteriorMatrix>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `K`; the input vocabulary is `K + 1` with `MASK = K`.
    pub num_classes: usize,
    pub context_vocab: usize,
    pub context_len: usize,
    /// `L = H * D_act`.
    pub chunk_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Standard deviation of the classification head at initialization.
    /// Small values make fresh models predict near-uniform posteriors.
    pub head_init_scale: f64,
    /// Number of trailing context slots whose per-slot embeddings are also
    /// added to every action input, so action positions see them before any
    /// attention. `0` disables the path.
    pub condition_slots: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 256,
            context_vocab: 32,
            context_len: 4,
            chunk_len: 56,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            head_init_scale: 1e-4,
            condition_slots: 0,
        }
    }
}

impl ModelConfig {
    /// A model small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            num_classes: 5,
            context_vocab: 4,
            context_len: 2,
            chunk_len: 4,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            ff_dim: 16,
            head_init_scale: 1e-4,
            condition_slots: 1,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.num_classes + 1
    }

    pub fn mask_id(&self) -> TokenId {
        self.num_classes as TokenId
    }

    pub fn seq_len(&self) -> usize {
        self.context_len + self.chunk_len
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("context_vocab", self.context_vocab),
            ("chunk_len", self.chunk_len),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.condition_slots > self.context_len {
            return Err(Error::Config(format!(
                "condition_slots {} exceeds context_len {}",
                self.condition_slots, self.context_len
            )));
        }
        if !(self.head_init_scale.is_finite() && self.head_init_scale >= 0.0) {
            return Err(Error::Config("head_init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// The transformer policy: configuration plus a flat parameter vector.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Context bins are ordinal, so context and condition embeddings start as
/// random Fourier features of the bin index: neighbouring bins begin close
/// together, which lets unseen bin combinations interpolate. `out` holds
/// `blocks` tables of `vocab` rows each; every column has variance `var`.
fn smooth_ordinal_init(out: &mut [f64], blocks: usize, vocab: usize, d: usize, var: f64, rng: &mut Rng) {
    let amplitude = (2.0 * var).sqrt();
    let freq = Normal::new(0.0, 1.0 / CONDITION_LENGTH_SCALE).expect("valid std");
    for block in 0..blocks {
        for j in 0..d {
            let w: f64 = freq.sample(rng);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            for b in 0..vocab {
                out[(block * vocab + b) * d + j] = amplitude * (w * b as f64 + phase).cos();
            }
        }
    }
}

/// Correlation length of the initial condition embeddings, in bins.
const CONDITION_LENGTH_SCALE: f64 = 16.0;

impl PolicyModel {
    /// Randomly initialized model. Matrices use `N(0, 1/fan_in)`, residual
    /// output projections are further scaled by `1/sqrt(2 * layers)`, layer
    /// norms start at identity and the head at `N(0, head_init_scale^2)`.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let d = config.embed_dim;
        let residual_scale = 1.0 / ((2 * config.layers) as f64).sqrt();
        for spec in &layout.tensors {
            let name = spec.name.as_str();
            let std = if name.ends_with("gain") {
                for p in &mut params[spec.range()] {
                    *p = 1.0;
                }
                continue;
            } else if name == "embed.condition" {
                let slots = config.condition_slots;
                let var = 1.0 / slots.max(1) as f64;
                smooth_ordinal_init(&mut params[spec.range()], slots, config.context_vocab, d, var, rng);
                continue;
            } else if name == "embed.context" {
                smooth_ordinal_init(&mut params[spec.range()], 1, config.context_vocab, d, 1.0, rng);
                continue;
            } else if name.starts_with("embed.") {
                1.0
            } else if name == "head.weight" {
                config.head_init_scale
            } else if spec.shape.len() == 2 {
                let fan_in = spec.shape[0] as f64;
                let base = 1.0 / fan_in.sqrt();
                if name.ends_with("wo") || name.ends_with("w2") {
                    base * residual_scale
                } else {
                    base
                }
            } else {
                continue;
            };
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("valid std");
                for p in &mut params[spec.range()] {
                    *p = normal.sample(rng);
                }
            }
        }
        debug_assert_eq!(layout.total, params.len());
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Builds a model from an existing parameter vector.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Validation(format!(
                "{} parameters supplied, configuration needs {}",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_inputs(&self, context: &[TokenId], actions: &[TokenId]) -> Result<()> {
        let c = &self.config;
        if context.len() != c.context_len {
            return Err(Error::Validation(format!(
                "context has {} tokens, model expects {}",
                context.len(),
                c.context_len
            )));
        }
        if actions.len() != c.chunk_len {
            return Err(Error::Validation(format!(
                "action chunk has {} tokens, model expects {}",
                actions.len(),
                c.chunk_len
            )));
        }
        if let Some(t) = context.iter().find(|&&t| t as usize >= c.context_vocab) {
            return Err(Error::Validation(format!(
                "context token {t} outside vocabulary of size {}",
                c.context_vocab
            )));
        }
        if let Some(t) = actions.iter().find(|&&t| t as usize >= c.vocab_size()) {
            return Err(Error::Validation(format!(
                "action token {t} outside vocabulary of size {}",
                c.vocab_size()
            )));
        }
        Ok(())
    }

    /// Posterior over the `K` classes at every action position.
    pub fn forward(&self, context: &[TokenId], actions: &ActionChunk) -> Result<PosteriorMatrix> {
        self.posteriors(context, &actions.tokens)
    }
}

impl PosteriorModel for PolicyModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn chunk_len(&self) -> usize {
        self.config.chunk_len
    }

    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn posteriors(&self, context: &[TokenId], actions: &[TokenId]) -> Result<PosteriorMatrix> {
        self.check_inputs(context, actions)?;
        let rows: Vec<usize> = (0..self.config.chunk_len).collect();
        let pass = transformer::forward(self, context, actions, &rows);
        PosteriorMatrix::from_flat(rows.len(), self.config.num_classes, pass.probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_classes: 16,
            context_vocab: 8,
            context_len: 3,
            chunk_len: 6,
            embed_dim: 16,
            layers: 2,
            heads: 4,
            ff_dim: 32,
            head_init_scale: 1e-4,
            condition_slots: 1,
        }
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let cfg = ModelConfig::default();
        let model = PolicyModel::new(cfg.clone(), &mut seeded(1)).unwrap();
        let chunk = ActionChunk::fully_masked(8, 7, 256);
        let post = model.forward(&[1, 2, 3, 4], &chunk).unwrap();
        post.validate().unwrap();
        let k = cfg.num_classes as f64;
        assert!(post.as_flat().iter().all(|p| (p - 1.0 / k).abs() < 1e-3));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = PolicyModel::new(small_config(), &mut seeded(9)).unwrap();
        let chunk = ActionChunk::new(vec![16, 3, 16, 7, 0, 16], 6, 1, 16).unwrap();
        let a = model.forward(&[1, 2, 3], &chunk).unwrap();
        let b = model.forward(&[1, 2, 3], &chunk).unwrap();
        let bits = |m: &PosteriorMatrix| m.as_flat().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = PolicyModel::new(small_config(), &mut seeded(9)).unwrap();
        let chunk = ActionChunk::fully_masked(6, 1, 16);
        assert!(matches!(model.forward(&[1, 2], &chunk), Err(Error::Validation(_))));
        assert!(matches!(model.forward(&[1, 2, 99], &chunk), Err(Error::Validation(_))));
        let short = ActionChunk::fully_masked(5, 1, 16);
        assert!(matches!(model.forward(&[1, 2, 3], &short), Err(Error::Validation(_))));
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = ModelConfig {
            heads: 3,
            ..small_config()
        };
        assert!(matches!(PolicyModel::new(cfg, &mut seeded(0)), Err(Error::Config(_))));
    }

    #[test]
    fn head_predicts_k_classes() {
        let model = PolicyModel::new(small_config(), &mut seeded(4)).unwrap();
        let head = model.tensors().iter().find(|t| t.name == "head.weight").unwrap();
        assert_eq!(head.shape, vec![16, 16]);
        let chunk = ActionChunk::fully_masked(6, 1, 16);
        assert_eq!(model.forward(&[0, 0, 0], &chunk).unwrap().classes(), 16);
    }

    #[test]
    fn swapping_position_embeddings_permutes_rows() {
        // With every action input equal to MASK, exchanging the position
        // embeddings of two action slots must exchange their posterior rows.
        let mut cfg = small_config();
        cfg.head_init_scale = 0.5;
        let model = PolicyModel::new(cfg.clone(), &mut seeded(21)).unwrap();
        let chunk = ActionChunk::fully_masked(6, 1, 16);
        let ctx = [4, 5, 6];
        let before = model.forward(&ctx, &chunk).unwrap();

        let mut swapped = model.clone();
        let pos = swapped.layout.position_embed;
        let d = cfg.embed_dim;
        let (a, b) = (cfg.context_len + 1, cfg.context_len + 4);
        for j in 0..d {
            swapped.params.swap(pos + a * d + j, pos + b * d + j);
        }
        let after = swapped.forward(&ctx, &chunk).unwrap();
        for k in 0..16 {
            assert!((before.row(1)[k] - after.row(4)[k]).abs() < 1e-12);
            assert!((before.row(4)[k] - after.row(1)[k]).abs() < 1e-12);
            assert!((before.row(0)[k] - after.row(0)[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_bidirectional() {
        let mut cfg = small_config();
        cfg.head_init_scale = 0.5;
        let model = PolicyModel::new(cfg, &mut seeded(5)).unwrap();
        let mut chunk = ActionChunk::fully_masked(6, 1, 16);
        let before = model.forward(&[1, 1, 1], &chunk).unwrap();
        chunk.tokens[5] = 3;
        let after = model.forward(&[1, 1, 1], &chunk).unwrap();
        let diff: f64 = before
            .row(0)
            .iter()
            .zip(after.row(0))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "earlier position ignored a later token");
    }
}
