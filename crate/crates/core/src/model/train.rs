//! Masked-denoising training: corruption, loss, backpropagation and updates.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::transformer::{example_loss, MaskedExample};
use super::PolicyModel;
use crate::codec::{ActionChunk, TokenId};
use crate::diffusion::{corrupt_exact, fixed_mask_count, sample_training_gamma};
use crate::rng::Rng;
use crate::schedule::ScheduleKind;
use crate::{Error, Result};

/// Source of the per-example mask ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSampler {
    /// `gamma(u)` with `u ~ U[0, 1)` under the given schedule family.
    Schedule(ScheduleKind),
    Fixed(f64),
}

impl GammaSampler {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            GammaSampler::Schedule(kind) => sample_training_gamma(kind, rng),
            GammaSampler::Fixed(g) => g,
        }
    }
}

/// How targets are corrupted for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Mask `round(gamma * L)` random positions (at least one) and score all
    /// of them.
    #[default]
    Diffusion,
    /// Mask a random suffix `j..L` and score only position `j`; trains the
    /// same network as a left-to-right predictor.
    SuffixAr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    #[default]
    Momentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Linear warm-up length; the rate then follows a cosine decay down to
    /// `learning_rate * final_lr_fraction` at `steps`.
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    pub gamma_schedule: ScheduleKind,
    pub corruption: CorruptionMode,
    /// Divide each example's summed loss by its mask count.
    pub normalize_by_mask_count: bool,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// When set, `fit` keeps an exponential moving average of the weights
    /// with this decay and leaves the averaged weights in the model.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Momentum,
            learning_rate: 0.05,
            momentum: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            steps: 2000,
            warmup_steps: 0,
            final_lr_fraction: 1.0,
            gamma_schedule: ScheduleKind::Cosine,
            corruption: CorruptionMode::Diffusion,
            normalize_by_mask_count: false,
            grad_clip: None,
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("momentum terms must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config("final_lr_fraction must lie in [0, 1]".into()));
        }
        if self.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let base = self.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = base * self.final_lr_fraction;
        floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First-order optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    beta2: f64,
    eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, param_count: usize) -> Self {
        Self {
            kind: config.optimizer,
            momentum: config.momentum,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            first: vec![0.0; param_count],
            second: match config.optimizer {
                OptimizerKind::Adam => vec![0.0; param_count],
                OptimizerKind::Momentum => Vec::new(),
            },
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Momentum => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.first).zip(grad) {
                    *v = self.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - self.momentum.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (((p, m), v), g) in params
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .zip(grad)
                {
                    *m = self.momentum * *m + (1.0 - self.momentum) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

/// One supervised pair: context tokens and the clean target chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub context: Vec<TokenId>,
    pub target: ActionChunk,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Pre-update batch loss of every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the last `window` steps.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(window)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Owns the optimizer state and corruption stream of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub sampler: GammaSampler,
    optimizer: Optimizer,
    rng: Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &PolicyModel, rng: Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            sampler: GammaSampler::Schedule(config.gamma_schedule),
            optimizer: Optimizer::new(&config, model.param_count()),
            config,
            rng,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    fn corrupt(&mut self, item: &BatchItem) -> MaskedExample {
        let len = item.target.len();
        match self.config.corruption {
            CorruptionMode::Diffusion => {
                let gamma = self.sampler.sample(&mut self.rng);
                let count = fixed_mask_count(gamma, len).max(1);
                let out = corrupt_exact(&item.target, count, gamma, &mut self.rng);
                MaskedExample {
                    context: item.context.clone(),
                    corrupted: out.corrupted.tokens,
                    targets: item.target.tokens.clone(),
                    masked_set: out.masked_set,
                }
            }
            CorruptionMode::SuffixAr => {
                let first = self.rng.random_range(0..len);
                let mut corrupted = item.target.tokens.clone();
                let mask = item.target.mask_id();
                for t in &mut corrupted[first..] {
                    *t = mask;
                }
                MaskedExample {
                    context: item.context.clone(),
                    corrupted,
                    targets: item.target.tokens.clone(),
                    masked_set: vec![first],
                }
            }
        }
    }

    /// Corrupts every item, computes the batch loss, backpropagates and
    /// applies one update. Returns the pre-update loss.
    pub fn train_step(&mut self, model: &mut PolicyModel, batch: &[BatchItem]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Validation("empty training batch".into()));
        }
        let examples: Vec<MaskedExample> = batch.iter().map(|item| self.corrupt(item)).collect();
        for ex in &examples {
            model.check_example(ex)?;
        }
        let normalize = self.config.normalize_by_mask_count;
        let batch_len = examples.len() as f64;
        let frozen: &PolicyModel = model;
        let per_example: Vec<(f64, Vec<f64>)> = examples
            .par_iter()
            .map(|ex| {
                let scale = if normalize { ex.masked_set.len().max(1) as f64 } else { 1.0 };
                let weight = 1.0 / (scale * batch_len);
                let mut grad = vec![0.0; frozen.param_count()];
                let loss = example_loss(frozen, ex, weight, Some(&mut grad));
                (loss / scale, grad)
            })
            .collect();
        let mut grad = vec![0.0; model.param_count()];
        let mut loss = 0.0;
        for (l, g) in &per_example {
            loss += l;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        loss /= batch_len;

        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            let max_param = model.params().iter().fold(0.0f64, |m, p| m.max(p.abs()));
            return Err(Error::TrainingDivergence {
                step: self.step as u64,
                detail: format!("loss {loss}, gradient norm {grad_norm}, max |param| {max_param}"),
            });
        }
        if let Some(clip) = self.config.grad_clip {
            if grad_norm > clip {
                let s = clip / grad_norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        let lr = self.config.lr_at(self.step);
        self.optimizer.apply(model.params_mut(), &grad, lr);
        self.step += 1;
        Ok(loss)
    }

    /// Runs `config.steps` steps over minibatches drawn with replacement from
    /// `data`. `on_step` receives `(step, loss)`.
    pub fn fit(
        &mut self,
        model: &mut PolicyModel,
        data: &[BatchItem],
        mut on_step: impl FnMut(usize, f64),
    ) -> Result<TrainReport> {
        if data.is_empty() {
            return Err(Error::Validation("empty training set".into()));
        }
        let mut report = TrainReport::default();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len();
        let mut ema = self.config.ema_decay.map(|d| (d, model.params().to_vec()));
        while self.step < self.config.steps {
            let mut batch = Vec::with_capacity(self.config.batch_size);
            while batch.len() < self.config.batch_size {
                if cursor == order.len() {
                    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut self.rng);
                    cursor = 0;
                }
                batch.push(data[order[cursor]].clone());
                cursor += 1;
            }
            let step = self.step;
            let loss = self.train_step(model, &batch)?;
            on_step(step, loss);
            report.losses.push(loss);
            if let Some((decay, avg)) = ema.as_mut() {
                // Bias-corrected warm start: early steps average over fewer updates.
                let d = decay.min((1.0 + step as f64) / (10.0 + step as f64));
                for (a, &p) in avg.iter_mut().zip(model.params()) {
                    *a = d * *a + (1.0 - d) * p;
                }
            }
        }
        if let Some((_, avg)) = ema {
            model.params_mut().copy_from_slice(&avg);
        }
        Ok(report)
    }
}
