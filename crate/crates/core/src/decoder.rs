//! Adaptive parallel refinement decoding with secondary re-masking.
//!
//! Decoding starts from an all-`MASK` chunk and runs exactly `T` rounds, one
//! model evaluation each. In round `r` (time `t = r / T`) the masked positions
//! with the highest scores are committed until the cumulative committed count
//! reaches `ceil((1 - gamma(t_{r+1})) L)`; their tokens are drawn by tempered
//! Gumbel-max sampling. Positions committed in earlier rounds are then
//! re-checked and reverted to `MASK` when their confidence fell below the
//! round's absolute threshold or dropped too far below the confidence they
//! had when first committed. The last round commits everything that is left
//! and never re-masks.

use rand::Rng as _;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::codec::{ActionChunk, TokenId};
use crate::model::{PosteriorMatrix, PosteriorModel};
use crate::rng::{seeded, Rng};
use crate::schedule::{
    eta_abs, gamma, keep_count, tau, MaskSchedule, ScheduleKind, TemperatureMode,
    ThresholdSchedule,
};
use crate::{Error, Result};

pub const TRACE_SCHEMA: &str = "diffact.decode_trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    #[default]
    MaxConfidence,
    ConfidenceGap,
    RandomOrder,
    /// Single round committing every position by argmax.
    OneShotParallel,
}

impl ScoringMode {
    pub const ALL: [ScoringMode; 4] = [
        ScoringMode::OneShotParallel,
        ScoringMode::RandomOrder,
        ScoringMode::ConfidenceGap,
        ScoringMode::MaxConfidence,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScoringMode::MaxConfidence => "max_confidence",
            ScoringMode::ConfidenceGap => "confidence_gap",
            ScoringMode::RandomOrder => "random_order",
            ScoringMode::OneShotParallel => "one_shot_parallel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemaskFlags {
    pub threshold_check: bool,
    pub residual_drop: bool,
}

impl RemaskFlags {
    pub const OFF: RemaskFlags = RemaskFlags {
        threshold_check: false,
        residual_drop: false,
    };

    pub fn any(self) -> bool {
        self.threshold_check || self.residual_drop
    }
}

impl Default for RemaskFlags {
    fn default() -> Self {
        Self {
            threshold_check: true,
            residual_drop: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub total_rounds: usize,
    pub scoring: ScoringMode,
    pub schedule: ScheduleKind,
    pub temperature_mode: TemperatureMode,
    /// Temperature of [`TemperatureMode::Fixed`].
    pub fixed_temperature: f64,
    pub remask: RemaskFlags,
    pub thresholds: ThresholdSchedule,
    pub seed: u64,
    /// Stop as soon as no `MASK` remains instead of running all rounds.
    pub early_exit: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            total_rounds: 12,
            scoring: ScoringMode::MaxConfidence,
            schedule: ScheduleKind::Cosine,
            temperature_mode: TemperatureMode::Decay,
            fixed_temperature: 1.0,
            remask: RemaskFlags::default(),
            thresholds: ThresholdSchedule::default(),
            seed: 0,
            early_exit: false,
        }
    }
}

impl DecodeConfig {
    /// Rounds actually run; one-shot parallel decoding forces a single round.
    pub fn effective_rounds(&self) -> usize {
        if self.scoring == ScoringMode::OneShotParallel {
            1
        } else {
            self.total_rounds
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_rounds == 0 {
            return Err(Error::Config("total_rounds must be at least 1".into()));
        }
        if !(self.fixed_temperature >= 0.0 && self.fixed_temperature.is_finite()) {
            return Err(Error::Config("fixed_temperature must be finite and >= 0".into()));
        }
        self.thresholds.validate()
    }
}

/// Everything that happened in one refinement round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub t: f64,
    pub gamma: f64,
    pub tau: f64,
    pub eta_abs: f64,
    /// Cumulative committed count this round aims for.
    pub keep_target: usize,
    pub tokens_before: Vec<TokenId>,
    #[serde(skip)]
    pub posteriors: Option<PosteriorMatrix>,
    /// Max-confidence `s` of every position.
    pub confidence: Vec<f64>,
    /// Ranking score `m` of every position.
    pub scores: Vec<f64>,
    pub keep_set: Vec<usize>,
    pub committed: Vec<(usize, TokenId)>,
    pub remask_abs: Vec<usize>,
    pub remask_drop: Vec<usize>,
    pub tokens_after: Vec<TokenId>,
    /// Confidence cached at each position's first commit, after this round.
    pub reference_confidence: Vec<Option<f64>>,
    pub first_commit_round: Vec<Option<usize>>,
}

impl RoundRecord {
    pub fn remasked(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.remask_abs.iter().chain(&self.remask_drop).copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub rounds: Vec<RoundRecord>,
    pub nfe: usize,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    schema: &'static str,
    version: u32,
    nfe_so_far: usize,
    #[serde(flatten)]
    record: &'a RoundRecord,
    posteriors: Option<Vec<&'a [f64]>>,
}

impl DecodeTrace {
    /// One JSON object per round, newline separated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (i, record) in self.rounds.iter().enumerate() {
            let posteriors = record
                .posteriors
                .as_ref()
                .map(|p| (0..p.rows()).map(|r| p.row(r)).collect());
            let line = TraceLine {
                schema: TRACE_SCHEMA,
                version: TRACE_VERSION,
                nfe_so_far: i + 1,
                record,
                posteriors,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Per-position ranking scores: max probability, top-1 minus top-2 gap, or
/// i.i.d. uniform noise.
pub fn score_positions(posteriors: &PosteriorMatrix, mode: ScoringMode, rng: &mut Rng) -> Result<Vec<f64>> {
    let rows = posteriors.rows();
    Ok(match mode {
        ScoringMode::MaxConfidence | ScoringMode::OneShotParallel => {
            (0..rows).map(|i| max_confidence(posteriors.row(i))).collect()
        }
        ScoringMode::ConfidenceGap => {
            if posteriors.classes() < 2 {
                return Err(Error::Config("confidence gap needs at least two classes".into()));
            }
            (0..rows).map(|i| confidence_gap(posteriors.row(i))).collect()
        }
        ScoringMode::RandomOrder => (0..rows).map(|_| rng.random::<f64>()).collect(),
    })
}

pub fn max_confidence(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn confidence_gap(row: &[f64]) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in row {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    first - second
}

/// Highest-scoring masked positions needed to bring the committed count up
/// to `keep_target`, ties broken by ascending index. Returned ascending.
pub fn select_keep_set(scores: &[f64], currently_masked: &[usize], keep_target: usize) -> Vec<usize> {
    let committed = scores.len() - currently_masked.len();
    let need = keep_target.saturating_sub(committed).min(currently_masked.len());
    let mut ranked = currently_masked.to_vec();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ranked.truncate(need);
    ranked.sort_unstable();
    ranked
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = k;
        }
    }
    best
}

/// Draws a token from `softmax(log p / tau)` via Gumbel-max:
/// `argmax_k(log p_k / tau + g_k)` with `g_k ~ Gumbel(0, 1)`. `tau = 0`
/// returns the plain argmax without consuming randomness.
pub fn gumbel_commit(row: &[f64], tau: f64, rng: &mut Rng) -> TokenId {
    if tau <= 0.0 {
        return argmax(row) as TokenId;
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    let mut best = (f64::NEG_INFINITY, argmax(row));
    for (k, &p) in row.iter().enumerate() {
        let noise = gumbel.sample(rng);
        if p <= 0.0 {
            continue;
        }
        let v = p.ln() / tau + noise;
        if v > best.0 {
            best = (v, k);
        }
    }
    best.1 as TokenId
}

/// Mutable state of one decode call.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub tokens: Vec<TokenId>,
    pub mask_id: TokenId,
    pub reference_confidence: Vec<Option<f64>>,
    pub first_commit_round: Vec<Option<usize>>,
}

impl DecodeState {
    pub fn new(len: usize, mask_id: TokenId) -> Self {
        Self {
            tokens: vec![mask_id; len],
            mask_id,
            reference_confidence: vec![None; len],
            first_commit_round: vec![None; len],
        }
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.tokens[i] == self.mask_id).collect()
    }

    fn commit(&mut self, i: usize, token: TokenId, confidence: f64, round: usize) {
        self.tokens[i] = token;
        self.reference_confidence[i] = Some(confidence);
        self.first_commit_round[i] = Some(round);
    }

    fn revert(&mut self, i: usize) {
        self.tokens[i] = self.mask_id;
        self.reference_confidence[i] = None;
        self.first_commit_round[i] = None;
    }
}

/// Re-mask sets `(R_abs, R_drop)` over positions committed before `round`.
/// `confidence` holds the current max-confidence of every position.
pub fn secondary_remask(
    state: &DecodeState,
    confidence: &[f64],
    round: usize,
    config: &DecodeConfig,
) -> (Vec<usize>, Vec<usize>) {
    let candidates: Vec<usize> = (0..state.tokens.len())
        .filter(|&i| matches!(state.first_commit_round[i], Some(r) if r < round))
        .collect();
    let mut abs = Vec::new();
    if config.remask.threshold_check {
        let eta = eta_abs(round, config.effective_rounds(), &config.thresholds);
        abs = candidates.iter().copied().filter(|&i| confidence[i] < eta).collect();
    }
    let mut drop = Vec::new();
    if config.remask.residual_drop {
        let residual = |i: usize| state.reference_confidence[i].expect("committed position") - confidence[i];
        match config.thresholds.top_q {
            None => {
                drop = candidates
                    .iter()
                    .copied()
                    .filter(|&i| residual(i) > config.thresholds.eta_drop)
                    .collect();
            }
            Some(q) => {
                let mut ranked: Vec<usize> = candidates.iter().copied().filter(|&i| residual(i) > 0.0).collect();
                ranked.sort_by(|&a, &b| residual(b).total_cmp(&residual(a)).then(a.cmp(&b)));
                ranked.truncate(q);
                ranked.sort_unstable();
                drop = ranked;
            }
        }
    }
    (abs, drop)
}

/// Decodes one chunk for `context`. The returned chunk has `horizon = L`
/// and `dims = 1`; use [`ActionChunk::with_layout`] to restore the layout.
pub fn decode<M: PosteriorModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    config: &DecodeConfig,
) -> Result<(ActionChunk, DecodeTrace)> {
    config.validate()?;
    let len = model.chunk_len();
    let classes = model.num_classes();
    let rounds = config.effective_rounds();
    let schedule = MaskSchedule::new(config.schedule, rounds, len);
    let mut rng = seeded(config.seed);
    let mut state = DecodeState::new(len, classes as TokenId);
    let mut trace = DecodeTrace::default();

    for round in 0..rounds {
        let t = schedule.time_of_round(round);
        let last = round + 1 == rounds;
        let tokens_before = state.tokens.clone();
        let posteriors = model.posteriors(context, &state.tokens)?;
        trace.nfe += 1;
        if posteriors.rows() != len || posteriors.classes() != classes {
            return Err(Error::ModelContract(format!(
                "model returned {}x{} posteriors for a {len}x{classes} chunk",
                posteriors.rows(),
                posteriors.classes()
            )));
        }
        posteriors.validate()?;

        let confidence: Vec<f64> = (0..len).map(|i| max_confidence(posteriors.row(i))).collect();
        let scores = match config.scoring {
            ScoringMode::MaxConfidence | ScoringMode::OneShotParallel => confidence.clone(),
            mode => score_positions(&posteriors, mode, &mut rng)?,
        };
        let keep_target = if last {
            len
        } else {
            keep_count(schedule.time_of_round(round + 1), &schedule)
        };
        let keep_set = select_keep_set(&scores, &state.masked_positions(), keep_target);
        let temperature = if config.scoring == ScoringMode::OneShotParallel {
            0.0
        } else {
            tau(t, config.temperature_mode, config.fixed_temperature, config.schedule)?
        };
        let mut committed = Vec::with_capacity(keep_set.len());
        for &i in &keep_set {
            let token = gumbel_commit(posteriors.row(i), temperature, &mut rng);
            state.commit(i, token, confidence[i], round);
            committed.push((i, token));
        }

        let (remask_abs, remask_drop) = if !last && config.remask.any() {
            secondary_remask(&state, &confidence, round, config)
        } else {
            (Vec::new(), Vec::new())
        };
        for &i in remask_abs.iter().chain(&remask_drop) {
            state.revert(i);
        }

        trace.rounds.push(RoundRecord {
            round,
            t,
            gamma: gamma(t, config.schedule)?,
            tau: temperature,
            eta_abs: eta_abs(round, rounds, &config.thresholds),
            keep_target,
            tokens_before,
            posteriors: Some(posteriors),
            confidence,
            scores,
            keep_set,
            committed,
            remask_abs,
            remask_drop,
            tokens_after: state.tokens.clone(),
            reference_confidence: state.reference_confidence.clone(),
            first_commit_round: state.first_commit_round.clone(),
        });

        if config.early_exit && state.masked_positions().is_empty() {
            break;
        }
    }

    if let Some(position) = state.masked_positions().first() {
        return Err(Error::Invariant(format!(
            "MASK left at position {position} after the final round"
        )));
    }
    let chunk = ActionChunk::new(state.tokens, len, 1, classes)?;
    Ok((chunk, trace))
}

impl ActionChunk {
    /// Same tokens viewed as `horizon x dims`.
    pub fn with_layout(mut self, horizon: usize, dims: usize) -> Result<Self> {
        if horizon * dims != self.tokens.len() {
            return Err(Error::Validation(format!(
                "cannot view {} tokens as {horizon}x{dims}",
                self.tokens.len()
            )));
        }
        self.horizon = horizon;
        self.dims = dims;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f64>>) -> PosteriorMatrix {
        PosteriorMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn score_examples() {
        let mut rng = seeded(0);
        let p = matrix(vec![vec![0.7, 0.2, 0.1], vec![1.0 / 3.0; 3], vec![0.0, 1.0, 0.0]]);
        let s = score_positions(&p, ScoringMode::MaxConfidence, &mut rng).unwrap();
        let g = score_positions(&p, ScoringMode::ConfidenceGap, &mut rng).unwrap();
        assert!((s[0] - 0.7).abs() < 1e-15 && (g[0] - 0.5).abs() < 1e-12);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15 && g[1] == 0.0);
        assert_eq!((s[2], g[2]), (1.0, 1.0));
        let single = matrix(vec![vec![1.0]]);
        assert!(matches!(
            score_positions(&single, ScoringMode::ConfidenceGap, &mut rng),
            Err(Error::Config(_))
        ));
        let r = score_positions(&p, ScoringMode::RandomOrder, &mut rng).unwrap();
        assert!(r.iter().all(|x| (0.0..1.0).contains(x)));
    }

    #[test]
    fn keep_set_examples() {
        assert_eq!(select_keep_set(&[0.9, 0.1, 0.8, 0.5], &[0, 1, 2, 3], 2), vec![0, 2]);
        assert_eq!(select_keep_set(&[0.5; 4], &[0, 1, 2, 3], 2), vec![0, 1]);
        assert_eq!(select_keep_set(&[0.1, 0.9, 0.3, 0.2], &[0, 2, 3], 4), vec![0, 2, 3]);
        // Already at target: no-op round.
        assert!(select_keep_set(&[0.1, 0.9, 0.3, 0.2], &[2, 3], 1).is_empty());
        // Committed positions are never selected even with top scores.
        assert_eq!(select_keep_set(&[0.1, 0.9, 0.3, 0.2], &[0, 2, 3], 2), vec![2]);
    }

    #[test]
    fn gumbel_hard_is_argmax() {
        let mut rng = seeded(1);
        assert_eq!(gumbel_commit(&[0.1, 0.6, 0.3], 0.0, &mut rng), 1);
        assert_eq!(gumbel_commit(&[0.4, 0.4, 0.2], 0.0, &mut rng), 0);
    }

    #[test]
    fn gumbel_unit_temperature_matches_categorical() {
        // Gumbel-max at tau = 1 samples the categorical exactly; 3 sigma of
        // the binomial frequency over 1e5 draws is ~0.0046.
        let mut rng = seeded(2);
        let n = 100_000;
        let zeros = (0..n).filter(|_| gumbel_commit(&[0.6, 0.4], 1.0, &mut rng) == 0).count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.6).abs() < 0.01, "{freq}");
    }

    #[test]
    fn gumbel_low_temperature_concentrates() {
        let mut rng = seeded(3);
        let n = 10_000;
        let ones = (0..n).filter(|_| gumbel_commit(&[0.1, 0.6, 0.3], 0.01, &mut rng) == 1).count();
        assert!(ones as f64 >= 0.99 * n as f64, "{ones}");
    }

    #[test]
    fn gumbel_never_picks_zero_probability() {
        let mut rng = seeded(4);
        assert!((0..1000).all(|_| gumbel_commit(&[0.0, 1.0, 0.0], 5.0, &mut rng) == 1));
    }

    fn state_with_commits(refs: &[Option<f64>], rounds: &[Option<usize>]) -> DecodeState {
        let mut s = DecodeState::new(refs.len(), 9);
        for (i, (r, c)) in refs.iter().zip(rounds).enumerate() {
            if let (Some(r), Some(c)) = (r, c) {
                s.commit(i, 1, *r, *c);
            }
        }
        s
    }

    #[test]
    fn remask_threshold_and_drop() {
        let state = state_with_commits(&[Some(0.9), Some(0.9), None], &[Some(0), Some(0), None]);
        let mut cfg = DecodeConfig {
            total_rounds: 12,
            thresholds: ThresholdSchedule {
                eta_abs_start: 0.5,
                eta_abs_end: 0.5,
                eta_drop: 0.15,
                top_q: None,
            },
            ..Default::default()
        };
        // Position 0: s = 0.3 < 0.5. Position 1: 0.9 - 0.7 = 0.2 > 0.15.
        let (abs, drop) = secondary_remask(&state, &[0.3, 0.7, 0.1], 1, &cfg);
        assert_eq!(abs, vec![0]);
        assert_eq!(drop, vec![0, 1]);

        cfg.remask = RemaskFlags::OFF;
        let (abs, drop) = secondary_remask(&state, &[0.3, 0.7, 0.1], 1, &cfg);
        assert!(abs.is_empty() && drop.is_empty());
    }

    #[test]
    fn remask_skips_same_round_commits_and_top_q() {
        let state = state_with_commits(
            &[Some(0.9), Some(0.95), Some(0.8), Some(0.99)],
            &[Some(0), Some(1), Some(1), Some(2)],
        );
        let cfg = DecodeConfig {
            thresholds: ThresholdSchedule {
                top_q: Some(1),
                ..Default::default()
            },
            remask: RemaskFlags {
                threshold_check: false,
                residual_drop: true,
            },
            ..Default::default()
        };
        let (_, drop) = secondary_remask(&state, &[0.5, 0.3, 0.7, 0.0], 2, &cfg);
        // Position 3 was committed this round; position 1 has the largest drop.
        assert_eq!(drop, vec![1]);
    }
}
