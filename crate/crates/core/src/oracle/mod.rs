//! Brute-force references used to cross-check the main implementation.
//!
//! Nothing here shares code with the modules it checks: marginals are built
//! from explicit transition matrices, [`exhaustive_decode`] replays the
//! refinement procedure with its own loops, and [`ar_baseline_decode`] is the
//! one-token-per-forward left-to-right decoder used for NFE comparisons.

mod tabulated;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use tabulated::{TabulatedCase, TabulatedModel};

use crate::codec::{ActionChunk, TokenId};
use crate::decoder::{DecodeConfig, ScoringMode};
use crate::diffusion::MarginalDistribution;
use crate::model::{PosteriorMatrix, PosteriorModel};
use crate::schedule::{ScheduleKind, TemperatureMode};
use crate::{Error, Result};

/// Largest vocabulary for which dense `V x V` products are attempted.
pub const MAX_DENSE_VOCAB: usize = 300;

/// One absorbing step as a dense row-stochastic matrix: every real token
/// stays with probability `1 - beta` and moves to `MASK` (the last id)
/// with probability `beta`; `MASK` is absorbing.
pub fn absorbing_matrix(beta: f64, vocab_size: usize) -> Vec<Vec<f64>> {
    let mask = vocab_size - 1;
    let mut q = vec![vec![0.0; vocab_size]; vocab_size];
    for (x, row) in q.iter_mut().enumerate() {
        if x == mask {
            row[mask] = 1.0;
        } else {
            row[x] = 1.0 - beta;
            row[mask] = beta;
        }
    }
    q
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Marginal of `token` after the steps `betas`, computed as
/// `onehot(token) * Q_1 * ... * Q_s` with every `Q` materialized.
pub fn enumerate_forward_marginal(token: TokenId, betas: &[f64], vocab_size: usize) -> Result<MarginalDistribution> {
    if !(2..=MAX_DENSE_VOCAB).contains(&vocab_size) {
        return Err(Error::Validation(format!(
            "dense oracle supports 2..={MAX_DENSE_VOCAB} symbols, got {vocab_size}"
        )));
    }
    if token as usize >= vocab_size {
        return Err(Error::Validation(format!("token {token} outside vocabulary")));
    }
    let mut product: Vec<Vec<f64>> = (0..vocab_size)
        .map(|i| (0..vocab_size).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for &beta in betas {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Domain(format!("beta = {beta} outside [0, 1]")));
        }
        product = matmul(&product, &absorbing_matrix(beta, vocab_size));
    }
    Ok(MarginalDistribution {
        probs: product.swap_remove(token as usize),
    })
}

/// Wraps a model and counts its forward calls.
pub struct CountingModel<M> {
    pub inner: M,
    calls: AtomicUsize,
}

impl<M> CountingModel<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }
}

impl<M: PosteriorModel> PosteriorModel for CountingModel<M> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn chunk_len(&self) -> usize {
        self.inner.chunk_len()
    }

    fn context_len(&self) -> usize {
        self.inner.context_len()
    }

    fn posteriors(&self, context: &[TokenId], actions: &[TokenId]) -> Result<PosteriorMatrix> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.posteriors(context, actions)
    }
}

/// Greedy left-to-right decoding: position `i` is filled by the argmax of
/// the forward pass that sees positions `0..i` committed. Returns the chunk
/// (`horizon = L`, `dims = 1`) and the number of forwards, which is `L`.
pub fn ar_baseline_decode<M: PosteriorModel + ?Sized>(model: &M, context: &[TokenId]) -> Result<(ActionChunk, usize)> {
    let len = model.chunk_len();
    let classes = model.num_classes();
    let mut tokens = vec![classes as TokenId; len];
    let mut nfe = 0;
    for i in 0..len {
        let p = model.posteriors(context, &tokens)?;
        nfe += 1;
        let row = p.row(i);
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        tokens[i] = best as TokenId;
    }
    Ok((ActionChunk::new(tokens, len, 1, classes)?, nfe))
}

/// The refinement procedure re-derived step by step for deterministic
/// configurations (hard temperature, re-masking off, a non-random score).
pub fn exhaustive_decode(model: &TabulatedModel, context: &[TokenId], config: &DecodeConfig) -> Result<ActionChunk> {
    let hard = config.temperature_mode == TemperatureMode::Hard
        || (config.temperature_mode == TemperatureMode::Fixed && config.fixed_temperature == 0.0)
        || config.scoring == ScoringMode::OneShotParallel;
    if !hard || config.remask.threshold_check || config.remask.residual_drop {
        return Err(Error::Config("exhaustive decode needs hard mode with re-masking off".into()));
    }
    if config.scoring == ScoringMode::RandomOrder {
        return Err(Error::Config("random order is not deterministic".into()));
    }
    let l = model.chunk_len();
    let k = model.num_classes();
    let mask = k as TokenId;
    let rounds = if config.scoring == ScoringMode::OneShotParallel {
        1
    } else {
        config.total_rounds
    };
    let mut a = vec![mask; l];

    for r in 0..rounds {
        let p = model.posteriors(context, &a)?;
        // How many positions must be committed once this round is done.
        let goal = if r == rounds - 1 {
            l
        } else {
            let next_t = (r + 1) as f64 / rounds as f64;
            let masked_fraction = match config.schedule {
                ScheduleKind::Cosine => (std::f64::consts::FRAC_PI_2 * next_t).cos(),
                ScheduleKind::Linear => 1.0 - next_t,
            };
            let raw = ((1.0 - masked_fraction) * l as f64 - 1e-9).ceil();
            (raw.max(1.0) as usize).min(l)
        };
        let mut done = a.iter().filter(|&&x| x != mask).count();

        let score = |i: usize| -> f64 {
            let mut sorted = p.row(i).to_vec();
            sorted.sort_by(|x, y| y.partial_cmp(x).expect("finite"));
            match config.scoring {
                ScoringMode::ConfidenceGap => sorted[0] - sorted[1],
                _ => sorted[0],
            }
        };
        // Take the best remaining masked position one at a time.
        let mut chosen = Vec::new();
        while done < goal {
            let mut pick: Option<usize> = None;
            for i in 0..l {
                if a[i] != mask || chosen.contains(&i) {
                    continue;
                }
                pick = match pick {
                    Some(j) if score(j) >= score(i) => Some(j),
                    _ => Some(i),
                };
            }
            match pick {
                Some(i) => chosen.push(i),
                None => break,
            }
            done += 1;
        }
        for i in chosen {
            let row = p.row(i);
            let mut best = 0;
            for c in 0..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            a[i] = best as TokenId;
        }
    }
    if a.contains(&mask) {
        return Err(Error::Invariant("oracle left a masked position".into()));
    }
    ActionChunk::new(a, l, 1, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::RemaskFlags;
    use crate::diffusion::forward_marginal;

    #[test]
    fn single_step_marginal() {
        let m = enumerate_forward_marginal(1, &[0.3], 4).unwrap();
        assert_eq!(m.probs, vec![0.0, 0.7, 0.0, 0.3]);
    }

    #[test]
    fn two_half_steps_mask_three_quarters() {
        let m = enumerate_forward_marginal(0, &[0.5, 0.5], 3).unwrap();
        assert!((m.mask_prob() - 0.75).abs() < 1e-15);
        let closed = forward_marginal(0, &[0.5, 0.5], 3).unwrap();
        assert_eq!(m.probs, closed.probs);
    }

    #[test]
    fn dense_oracle_rejects_large_vocab() {
        assert!(enumerate_forward_marginal(0, &[0.1], 301).is_err());
        assert!(enumerate_forward_marginal(5, &[0.1], 4).is_err());
    }

    fn hard() -> DecodeConfig {
        DecodeConfig {
            temperature_mode: TemperatureMode::Hard,
            remask: RemaskFlags::OFF,
            ..Default::default()
        }
    }

    #[test]
    fn single_position_single_round() {
        let model = TabulatedModel::from_fn(1, 3, 1, |_, _| vec![vec![0.1, 0.2, 0.7]]).unwrap();
        let cfg = DecodeConfig { total_rounds: 1, ..hard() };
        assert_eq!(exhaustive_decode(&model, &[0], &cfg).unwrap().tokens, vec![2]);
    }

    #[test]
    fn easy_position_commits_first() {
        // Position 1 is more confident on the all-MASK state; once it is
        // committed as token 1, position 0 prefers token 1 too.
        let model = TabulatedModel::from_fn(2, 2, 1, |_, state| {
            if state[1] == 1 {
                vec![vec![0.2, 0.8], vec![0.1, 0.9]]
            } else {
                vec![vec![0.6, 0.4], vec![0.1, 0.9]]
            }
        })
        .unwrap();
        let cfg = DecodeConfig { total_rounds: 2, ..hard() };
        assert_eq!(exhaustive_decode(&model, &[0], &cfg).unwrap().tokens, vec![1, 1]);
        let (chunk, trace) = crate::decode(&model, &[0], &cfg).unwrap();
        assert_eq!(chunk.tokens, vec![1, 1]);
        assert_eq!(trace.rounds[0].keep_set, vec![1]);
    }

    #[test]
    fn exhaustive_rejects_stochastic_configs() {
        let model = TabulatedModel::random(2, 2, 1, 0).unwrap();
        assert!(exhaustive_decode(&model, &[0], &DecodeConfig::default()).is_err());
    }

    #[test]
    fn ar_baseline_uses_one_forward_per_position() {
        let model = CountingModel::new(TabulatedModel::random(3, 3, 2, 4).unwrap());
        let (_, nfe) = ar_baseline_decode(&model, &[1]).unwrap();
        assert_eq!((nfe, model.calls()), (3, 3));
    }

    #[test]
    fn ar_baseline_of_length_one_matches_one_shot() {
        let model = TabulatedModel::random(1, 3, 2, 9).unwrap();
        let (ar, nfe) = ar_baseline_decode(&model, &[1]).unwrap();
        let cfg = DecodeConfig {
            scoring: ScoringMode::OneShotParallel,
            ..Default::default()
        };
        let (one_shot, _) = crate::decode(&model, &[1], &cfg).unwrap();
        assert_eq!(nfe, 1);
        assert_eq!(ar.tokens, one_shot.tokens);
    }
}
