//! Policy evaluation, chance baselines and the decoding ablation grid.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BenchConfig, TaskSpec};
use crate::codec::{ActionChunk, TokenId, TokenizerSpec};
use crate::decoder::{decode, DecodeConfig, ScoringMode};
use crate::model::{PosteriorMatrix, PosteriorModel};
use crate::rng::{derive_seed, seeded, sha256_hex};
use crate::schedule::TemperatureMode;
use crate::{Error, Result};

/// Column order of every report CSV.
pub const REPORT_COLUMNS: [&str; 11] = [
    "strategy",
    "temperature",
    "episodes",
    "successes",
    "success_rate",
    "mean_nfe",
    "mean_decode_ms",
    "mean_final_distance",
    "rounds",
    "task_digest",
    "config_fingerprint",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub task_id: u64,
    pub success: bool,
    pub final_distance: f64,
    pub nfe: usize,
    pub decode_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub temperature: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_nfe: f64,
    pub mean_decode_ms: f64,
    pub mean_final_distance: f64,
    pub rounds: usize,
    /// SHA-256 over the evaluated task ids and seeds.
    pub task_digest: String,
    pub config_fingerprint: String,
    #[serde(skip)]
    pub outcomes: Vec<EpisodeOutcome>,
}

impl EvalReport {
    fn from_outcomes(
        strategy: String,
        temperature: String,
        rounds: usize,
        tasks: &[TaskSpec],
        config_fingerprint: String,
        outcomes: Vec<EpisodeOutcome>,
    ) -> Self {
        let n = outcomes.len();
        let successes = outcomes.iter().filter(|o| o.success).count();
        let mean = |f: &dyn Fn(&EpisodeOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n.max(1) as f64;
        Self {
            strategy,
            temperature,
            episodes: n,
            successes,
            success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
            mean_nfe: mean(&|o| o.nfe as f64),
            mean_decode_ms: mean(&|o| o.decode_ms),
            mean_final_distance: mean(&|o| o.final_distance),
            rounds,
            task_digest: task_digest(tasks),
            config_fingerprint,
            outcomes,
        }
    }

    fn csv_row(&self) -> Vec<String> {
        vec![
            self.strategy.clone(),
            self.temperature.clone(),
            self.episodes.to_string(),
            self.successes.to_string(),
            format!("{:.6}", self.success_rate),
            format!("{:.3}", self.mean_nfe),
            format!("{:.3}", self.mean_decode_ms),
            format!("{:.6}", self.mean_final_distance),
            self.rounds.to_string(),
            self.task_digest.clone(),
            self.config_fingerprint.clone(),
        ]
    }
}

/// SHA-256 of the canonical JSON of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

fn task_digest(tasks: &[TaskSpec]) -> String {
    let bytes: Vec<u8> = tasks
        .iter()
        .flat_map(|t| t.task_id.to_le_bytes().into_iter().chain(t.seed.to_le_bytes()))
        .collect();
    sha256_hex(&bytes)
}

fn temperature_label(config: &DecodeConfig) -> String {
    match config.temperature_mode {
        TemperatureMode::Fixed => format!("fixed_{}", config.fixed_temperature),
        mode => mode.label().to_string(),
    }
}

fn check_compat<M: PosteriorModel + ?Sized>(model: &M, tokenizer: &TokenizerSpec, bench: &BenchConfig) -> Result<()> {
    if model.num_classes() != tokenizer.num_bins {
        return Err(Error::Config(format!(
            "model predicts {} classes but the tokenizer has {} bins",
            model.num_classes(),
            tokenizer.num_bins
        )));
    }
    if tokenizer.dims != bench.action_dims || model.chunk_len() != bench.chunk_len() {
        return Err(Error::Config(format!(
            "chunk layout mismatch: model L={}, tokenizer D={}, bench {}x{}",
            model.chunk_len(),
            tokenizer.dims,
            bench.horizon,
            bench.action_dims
        )));
    }
    if model.context_len() != bench.context_len() {
        return Err(Error::Config(format!(
            "model expects {} context tokens, tasks provide {}",
            model.context_len(),
            bench.context_len()
        )));
    }
    Ok(())
}

/// Decodes one chunk per task, rolls it out and scores success. Every
/// episode draws from its own decode stream derived from the task id, so
/// two configurations see the same noise for the same task.
pub fn evaluate<M: PosteriorModel + ?Sized>(
    model: &M,
    tokenizer: &TokenizerSpec,
    bench: &BenchConfig,
    tasks: &[TaskSpec],
    config: &DecodeConfig,
) -> Result<EvalReport> {
    check_compat(model, tokenizer, bench)?;
    config.validate()?;
    let outcomes = tasks
        .par_iter()
        .map(|task| {
            let episode_config = DecodeConfig {
                seed: derive_seed(config.seed, &format!("episode/{}", task.task_id)),
                ..config.clone()
            };
            let started = Instant::now();
            let (chunk, trace) = decode(model, &task.context_tokens(bench), &episode_config)?;
            let decode_ms = started.elapsed().as_secs_f64() * 1e3;
            let rows = tokenizer.detokenize_chunk(&chunk.with_layout(bench.horizon, bench.action_dims)?)?;
            let final_distance = task.final_distance(&rows);
            Ok(EpisodeOutcome {
                task_id: task.task_id,
                success: final_distance <= bench.success_radius,
                final_distance,
                nfe: trace.nfe,
                decode_ms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_outcomes(
        config.scoring.label().to_string(),
        temperature_label(config),
        config.effective_rounds(),
        tasks,
        fingerprint(config)?,
        outcomes,
    ))
}

/// Chance floor: every token drawn uniformly from its dimension's bins.
pub fn random_chunk_baseline(
    tokenizer: &TokenizerSpec,
    bench: &BenchConfig,
    tasks: &[TaskSpec],
    seed: u64,
) -> Result<EvalReport> {
    let outcomes = tasks
        .iter()
        .map(|task| {
            let mut rng = seeded(derive_seed(seed, &format!("random/{}", task.task_id)));
            let tokens = (0..bench.chunk_len())
                .map(|i| rng.random_range(0..tokenizer.bins[i % bench.action_dims].bin_count()) as TokenId)
                .collect();
            let chunk = ActionChunk::new(tokens, bench.horizon, bench.action_dims, tokenizer.num_bins)?;
            let final_distance = task.final_distance(&tokenizer.detokenize_chunk(&chunk)?);
            Ok(EpisodeOutcome {
                task_id: task.task_id,
                success: final_distance <= bench.success_radius,
                final_distance,
                nfe: 0,
                decode_ms: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_outcomes(
        "random_tokens".into(),
        "none".into(),
        0,
        tasks,
        fingerprint(&seed)?,
        outcomes,
    ))
}

/// Strategy x temperature grid of decode configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub strategies: Vec<ScoringMode>,
    /// `(mode, fixed value)` pairs.
    pub temperatures: Vec<(TemperatureMode, f64)>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            strategies: ScoringMode::ALL.to_vec(),
            temperatures: vec![
                (TemperatureMode::Hard, 0.0),
                (TemperatureMode::Fixed, 1.0),
                (TemperatureMode::Decay, 0.0),
            ],
        }
    }
}

impl AblationGrid {
    pub fn configs(&self, base: &DecodeConfig) -> Vec<DecodeConfig> {
        let mut out = Vec::new();
        for &scoring in &self.strategies {
            for &(temperature_mode, fixed) in &self.temperatures {
                out.push(DecodeConfig {
                    scoring,
                    temperature_mode,
                    fixed_temperature: if temperature_mode == TemperatureMode::Fixed {
                        fixed
                    } else {
                        base.fixed_temperature
                    },
                    ..base.clone()
                });
            }
        }
        out
    }
}

/// One report per grid cell, all over the same tasks and decode seed.
pub fn run_ablation<M: PosteriorModel + ?Sized>(
    model: &M,
    tokenizer: &TokenizerSpec,
    bench: &BenchConfig,
    tasks: &[TaskSpec],
    grid: &AblationGrid,
    base: &DecodeConfig,
) -> Result<Vec<EvalReport>> {
    grid.configs(base)
        .iter()
        .map(|cfg| evaluate(model, tokenizer, bench, tasks, cfg))
        .collect()
}

pub fn write_reports_csv<W: Write>(reports: &[EvalReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for r in reports {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Replays the tokenized expert chunk of each known context with certainty.
/// Tasks are told apart only by their context, so use it with
/// `absolute_context` when displacements may collide.
pub struct ExpertPolicy {
    chunks: HashMap<Vec<TokenId>, Vec<TokenId>>,
    num_classes: usize,
    chunk_len: usize,
    context_len: usize,
}

impl ExpertPolicy {
    pub fn new(tokenizer: &TokenizerSpec, bench: &BenchConfig, tasks: &[TaskSpec]) -> Result<Self> {
        let mut chunks = HashMap::new();
        for task in tasks {
            let chunk = tokenizer.tokenize_chunk(&task.expert_chunk(bench))?;
            chunks.insert(task.context_tokens(bench), chunk.tokens);
        }
        Ok(Self {
            chunks,
            num_classes: tokenizer.num_bins,
            chunk_len: bench.chunk_len(),
            context_len: bench.context_len(),
        })
    }
}

impl PosteriorModel for ExpertPolicy {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    fn context_len(&self) -> usize {
        self.context_len
    }

    fn posteriors(&self, context: &[TokenId], _actions: &[TokenId]) -> Result<PosteriorMatrix> {
        let tokens = self
            .chunks
            .get(context)
            .ok_or_else(|| Error::Coverage(format!("no expert chunk for context {context:?}")))?;
        let mut data = vec![0.0; self.chunk_len * self.num_classes];
        for (i, &t) in tokens.iter().enumerate() {
            data[i * self.num_classes + t as usize] = 1.0;
        }
        PosteriorMatrix::from_flat(self.chunk_len, self.num_classes, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::generate_dataset;

    #[test]
    fn expert_policy_fails_only_on_clipped_tasks() {
        let cfg = BenchConfig {
            absolute_context: true,
            ..BenchConfig::default()
        };
        let data = generate_dataset(400, 3, &cfg).unwrap();
        let tasks: Vec<TaskSpec> = data.episodes.iter().map(|e| e.task.clone()).collect();
        let expert = ExpertPolicy::new(&data.tokenizer, &cfg, &tasks).unwrap();
        let report = evaluate(&expert, &data.tokenizer, &cfg, &tasks, &DecodeConfig::default()).unwrap();
        assert_eq!(report.mean_nfe, 12.0);
        let inside = |t: &TaskSpec| {
            let row = &t.expert_chunk(&cfg)[0];
            (0..2).all(|d| {
                let e = data.tokenizer.edges(d);
                row[d] >= e[0] && row[d] <= e[e.len() - 1]
            })
        };
        for (task, outcome) in tasks.iter().zip(&report.outcomes) {
            if inside(task) {
                assert!(outcome.success, "task {} missed by {}", task.task_id, outcome.final_distance);
            }
        }
        assert!(report.success_rate >= 0.97, "{}", report.success_rate);
        assert_eq!(report.successes as f64 / report.episodes as f64, report.success_rate);
    }

    #[test]
    fn random_tokens_rarely_succeed() {
        let cfg = BenchConfig::default();
        let data = generate_dataset(300, 4, &cfg).unwrap();
        let tasks: Vec<TaskSpec> = data.episodes.iter().map(|e| e.task.clone()).collect();
        let report = random_chunk_baseline(&data.tokenizer, &cfg, &tasks, 1).unwrap();
        assert!(report.success_rate < 0.1, "{}", report.success_rate);
    }

    #[test]
    fn grid_is_four_by_three() {
        let configs = AblationGrid::default().configs(&DecodeConfig::default());
        assert_eq!(configs.len(), 12);
        assert_eq!(configs[0].scoring, ScoringMode::OneShotParallel);
        assert_eq!(configs[11].scoring, ScoringMode::MaxConfidence);
        assert_eq!(configs[11].temperature_mode, TemperatureMode::Decay);
    }

    #[test]
    fn csv_has_fixed_header() {
        let mut buf = Vec::new();
        write_reports_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), REPORT_COLUMNS.join(","));
    }

    #[test]
    fn vocab_mismatch_is_a_config_error() {
        let cfg = BenchConfig {
            num_bins: 16,
            ..Default::default()
        };
        let data = generate_dataset(20, 4, &cfg).unwrap();
        let model = crate::oracle::TabulatedModel::random(2, 2, 1, 0).unwrap();
        let err = evaluate(&model, &data.tokenizer, &cfg, &[], &DecodeConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
