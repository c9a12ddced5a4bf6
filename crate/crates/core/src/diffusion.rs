//! Absorbing-mask forward process and the masked cross-entropy objective.

use rand::Rng as _;

use crate::codec::{ActionChunk, TokenId};
use crate::model::PosteriorMatrix;
use crate::rng::Rng;
use crate::schedule::{gamma, ScheduleKind};
use crate::{Error, Result};

/// Probabilities are clamped here before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

/// A corrupted chunk together with the positions that were masked.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionOutcome {
    pub corrupted: ActionChunk,
    /// Ascending masked positions.
    pub masked_set: Vec<usize>,
    pub gamma_used: f64,
}

fn require_clean(chunk: &ActionChunk) -> Result<()> {
    match chunk.first_mask() {
        Some(position) => Err(Error::Validation(format!(
            "chunk to corrupt already holds MASK at position {position}"
        ))),
        None => Ok(()),
    }
}

fn apply_mask(chunk: &ActionChunk, masked_set: Vec<usize>, gamma_used: f64) -> CorruptionOutcome {
    let mut corrupted = chunk.clone();
    let mask = chunk.mask_id();
    for &i in &masked_set {
        corrupted.tokens[i] = mask;
    }
    CorruptionOutcome {
        corrupted,
        masked_set,
        gamma_used,
    }
}

/// Number of positions masked at ratio `gamma` by [`corrupt_fixed_count`].
pub fn fixed_mask_count(gamma: f64, len: usize) -> usize {
    ((gamma * len as f64).round() as usize).min(len)
}

/// Masks exactly `round(gamma * L)` positions drawn uniformly without
/// replacement.
pub fn corrupt_fixed_count(chunk: &ActionChunk, gamma: f64, rng: &mut Rng) -> Result<CorruptionOutcome> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Domain(format!("gamma = {gamma} outside (0, 1]")));
    }
    require_clean(chunk)?;
    let count = fixed_mask_count(gamma, chunk.len());
    Ok(corrupt_exact(chunk, count, gamma, rng))
}

/// Masks exactly `count` uniformly chosen positions.
pub(crate) fn corrupt_exact(
    chunk: &ActionChunk,
    count: usize,
    gamma_used: f64,
    rng: &mut Rng,
) -> CorruptionOutcome {
    let mut masked_set = rand::seq::index::sample(rng, chunk.len(), count).into_vec();
    masked_set.sort_unstable();
    apply_mask(chunk, masked_set, gamma_used)
}

/// Masks each position independently with probability `beta_bar`.
pub fn corrupt_bernoulli(chunk: &ActionChunk, beta_bar: f64, rng: &mut Rng) -> Result<CorruptionOutcome> {
    if !(0.0..=1.0).contains(&beta_bar) {
        return Err(Error::Domain(format!("beta_bar = {beta_bar} outside [0, 1]")));
    }
    require_clean(chunk)?;
    let masked_set = (0..chunk.len())
        .filter(|_| rng.random::<f64>() < beta_bar)
        .collect();
    Ok(apply_mask(chunk, masked_set, beta_bar))
}

/// Mask ratio for one training example: `gamma(u)` with `u ~ U[0, 1)`.
pub fn sample_training_gamma(kind: ScheduleKind, rng: &mut Rng) -> f64 {
    let u: f64 = rng.random();
    gamma(u, kind).expect("u drawn from [0, 1)")
}

/// Per-token categorical over the `V = K + 1` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDistribution {
    pub probs: Vec<f64>,
}

impl MarginalDistribution {
    pub fn mask_prob(&self) -> f64 {
        *self.probs.last().expect("non-empty vocabulary")
    }
}

/// Cumulative mask probability `1 - prod(1 - beta_s)`.
pub fn cumulative_beta(betas: &[f64]) -> f64 {
    1.0 - betas.iter().map(|b| 1.0 - b).product::<f64>()
}

/// Closed-form marginal of `token` after the absorbing steps `betas`, over a
/// vocabulary of `vocab_size` symbols whose last id is `MASK`.
pub fn forward_marginal(token: TokenId, betas: &[f64], vocab_size: usize) -> Result<MarginalDistribution> {
    if vocab_size < 2 || token as usize >= vocab_size {
        return Err(Error::Validation(format!(
            "token {token} outside vocabulary of size {vocab_size}"
        )));
    }
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(Error::Domain(format!("beta = {b} outside [0, 1]")));
    }
    let mask = vocab_size - 1;
    let mut probs = vec![0.0; vocab_size];
    if token as usize == mask {
        probs[mask] = 1.0;
    } else {
        let beta_bar = cumulative_beta(betas);
        probs[token as usize] = 1.0 - beta_bar;
        probs[mask] = beta_bar;
    }
    Ok(MarginalDistribution { probs })
}

/// `-sum_{i in masked_set} log p_i(target_i)` with hard one-hot targets.
/// An empty masked set yields `0`.
pub fn masked_ce(posteriors: &PosteriorMatrix, targets: &ActionChunk, masked_set: &[usize]) -> Result<f64> {
    if posteriors.rows() != targets.len() || posteriors.classes() != targets.num_classes {
        return Err(Error::Validation(format!(
            "posterior shape {}x{} does not match targets {}x{}",
            posteriors.rows(),
            posteriors.classes(),
            targets.len(),
            targets.num_classes
        )));
    }
    if let Some(position) = targets.first_mask() {
        return Err(Error::Validation(format!(
            "training target holds MASK at position {position}"
        )));
    }
    let mut loss = 0.0;
    for &i in masked_set {
        if i >= targets.len() {
            return Err(Error::Validation(format!("masked index {i} out of range")));
        }
        let p = posteriors.row(i)[targets.tokens[i] as usize];
        loss -= p.max(LOG_FLOOR).ln();
    }
    Ok(loss)
}
