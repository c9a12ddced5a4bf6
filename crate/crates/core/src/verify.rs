//! Self-check suites run by `diffact verify`, plus the decode invariant
//! checker shared with the test suites.

use std::f64::consts::{FRAC_PI_4, LN_2};

use rand::Rng as _;

use crate::codec::{fit_bins_with_layout, ActionChunk, DimLayout};
use crate::decoder::{decode, DecodeConfig, DecodeTrace, RemaskFlags, ScoringMode};
use crate::diffusion::{forward_marginal, masked_ce};
use crate::model::{MaskedExample, ModelConfig, PolicyModel, PosteriorMatrix, PosteriorModel};
use crate::oracle::{ar_baseline_decode, enumerate_forward_marginal, exhaustive_decode, CountingModel, TabulatedCase};
use crate::rng::{seeded, stream};
use crate::schedule::{gamma, keep_count, MaskSchedule, ScheduleKind, TemperatureMode, ThresholdSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn suite(name: &'static str, run: impl FnOnce() -> Result<String>) -> SuiteResult {
    match run() {
        Ok(detail) => SuiteResult {
            name,
            passed: true,
            detail,
        },
        Err(e) => SuiteResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Invariant(msg()))
    }
}

/// Checks one decode trace against the contract of the refinement decoder.
pub fn check_trace(trace: &DecodeTrace, chunk: &ActionChunk, config: &DecodeConfig, mask_id: u32) -> Result<()> {
    let rounds = config.effective_rounds();
    ensure(trace.nfe == trace.rounds.len(), || {
        format!("nfe {} but {} rounds recorded", trace.nfe, trace.rounds.len())
    })?;
    if !config.early_exit {
        ensure(trace.nfe == rounds, || format!("nfe {} for T = {rounds}", trace.nfe))?;
    }
    ensure(!chunk.tokens.contains(&mask_id), || "MASK in the decoded chunk".into())?;
    let last = trace.rounds.last().ok_or_else(|| Error::Invariant("empty trace".into()))?;
    ensure(last.tokens_after == chunk.tokens, || "final round differs from the output".into())?;

    for (r, rec) in trace.rounds.iter().enumerate() {
        if r > 0 {
            ensure(rec.tokens_before == trace.rounds[r - 1].tokens_after, || {
                format!("round {r} does not start where round {} ended", r - 1)
            })?;
        } else {
            ensure(rec.tokens_before.iter().all(|&t| t == mask_id), || "first round is not all MASK".into())?;
        }
        for &i in &rec.keep_set {
            ensure(rec.tokens_before[i] == mask_id, || {
                format!("round {r} committed already committed position {i}")
            })?;
        }
        let remasked = rec.remasked();
        for &i in &remasked {
            ensure(rec.tokens_before[i] != mask_id, || {
                format!("round {r} re-masked position {i} that was not committed before the round")
            })?;
            ensure(!rec.keep_set.contains(&i), || {
                format!("round {r} committed and re-masked position {i}")
            })?;
            ensure(rec.tokens_after[i] == mask_id, || format!("round {r} failed to revert {i}"))?;
        }
        if r + 1 == rounds {
            ensure(remasked.is_empty(), || "final round re-masked".into())?;
        }
        // Commit persistence: surviving commitments never change.
        for i in 0..rec.tokens_before.len() {
            if rec.tokens_before[i] != mask_id && !remasked.contains(&i) {
                ensure(rec.tokens_after[i] == rec.tokens_before[i], || {
                    format!("round {r} changed committed position {i}")
                })?;
            }
        }
        let committed = rec.tokens_after.iter().filter(|&&t| t != mask_id).count();
        if !config.remask.any() {
            let schedule = MaskSchedule::new(config.schedule, rounds, chunk.tokens.len());
            let expected = keep_count(schedule.time_of_round(r + 1), &schedule);
            ensure(committed == expected, || {
                format!("round {r}: {committed} committed, schedule wants {expected}")
            })?;
        }
    }
    Ok(())
}

/// Decodes twice, checks the trace and that both runs agree.
pub fn check_decode<M: PosteriorModel + ?Sized>(model: &M, context: &[u32], config: &DecodeConfig) -> Result<()> {
    let (chunk, trace) = decode(model, context, config)?;
    check_trace(&trace, &chunk, config, model.num_classes() as u32)?;
    let (again, trace_again) = decode(model, context, config)?;
    ensure(again == chunk && trace_again == trace, || "decode is not deterministic".into())
}

/// A random decode configuration for invariant fuzzing.
pub fn random_decode_config(rng: &mut crate::rng::Rng) -> DecodeConfig {
    let scoring = ScoringMode::ALL[rng.random_range(0..4)];
    let temperature_mode = [TemperatureMode::Decay, TemperatureMode::Fixed, TemperatureMode::Hard, TemperatureMode::Gamma]
        [rng.random_range(0..4)];
    let start: f64 = rng.random_range(0.0..0.5);
    DecodeConfig {
        total_rounds: rng.random_range(1..=16),
        scoring,
        schedule: if rng.random_bool(0.8) {
            ScheduleKind::Cosine
        } else {
            ScheduleKind::Linear
        },
        temperature_mode,
        fixed_temperature: rng.random_range(0.0..2.0),
        remask: RemaskFlags {
            threshold_check: rng.random_bool(0.5),
            residual_drop: rng.random_bool(0.5),
        },
        thresholds: ThresholdSchedule {
            eta_abs_start: start,
            eta_abs_end: rng.random_range(start..1.0),
            eta_drop: rng.random_range(0.0..0.3),
            top_q: if rng.random_bool(0.3) {
                Some(rng.random_range(1..4))
            } else {
                None
            },
        },
        seed: rng.random(),
        early_exit: false,
    }
}

fn schedule_suite() -> Result<String> {
    let g = |t| gamma(t, ScheduleKind::Cosine);
    ensure(g(0.0)? == 1.0, || "gamma(0) != 1".into())?;
    ensure((g(0.5)? - FRAC_PI_4.cos()).abs() < 1e-12, || "gamma(0.5)".into())?;
    ensure((g(2.0 / 3.0)? - 0.5).abs() < 1e-12, || "gamma(2/3)".into())?;
    let mut checked = 0;
    for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
        for t_rounds in 1..=24 {
            for len in 1..=64 {
                let s = MaskSchedule::new(kind, t_rounds, len);
                let counts: Vec<usize> = (0..t_rounds).map(|r| s.keep_target_after_round(r)).collect();
                ensure(counts.windows(2).all(|w| w[0] <= w[1]), || {
                    format!("keep counts not monotone for T={t_rounds}, L={len}")
                })?;
                ensure(counts[t_rounds - 1] == len, || format!("T={t_rounds}, L={len} never completes"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} schedules monotone and complete"))
}

fn marginal_suite() -> Result<String> {
    let mut rng = stream(0, "verify/marginal");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let vocab = rng.random_range(2..=40);
        let token = rng.random_range(0..vocab) as u32;
        let betas: Vec<f64> = (0..rng.random_range(0..=12)).map(|_| rng.random::<f64>()).collect();
        let dense = enumerate_forward_marginal(token, &betas, vocab)?;
        let closed = forward_marginal(token, &betas, vocab)?;
        for (a, b) in dense.probs.iter().zip(&closed.probs) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 cases, max deviation {worst:.1e}"))
}

fn ce_suite() -> Result<String> {
    let k = 256;
    let uniform = PosteriorMatrix::from_flat(56, k, vec![1.0 / k as f64; 56 * k])?;
    let targets = ActionChunk::new((0..56).map(|i| (i * 7 % k) as u32).collect(), 8, 7, k)?;
    let masked: Vec<usize> = (0..56).step_by(3).collect();
    let loss = masked_ce(&uniform, &targets, &masked)?;
    let expected = masked.len() as f64 * 8.0 * LN_2;
    ensure((loss - expected).abs() < 1e-9, || format!("uniform loss {loss} != {expected}"))?;
    let mut onehot = vec![0.0; 56 * k];
    for (i, &t) in targets.tokens.iter().enumerate() {
        onehot[i * k + t as usize] = 1.0;
    }
    let perfect = masked_ce(&PosteriorMatrix::from_flat(56, k, onehot)?, &targets, &masked)?;
    ensure(perfect == 0.0, || format!("perfect prediction loss {perfect}"))?;
    Ok(format!("uniform {loss:.6} = {} ln 256, perfect 0", masked.len()))
}

fn grad_suite() -> Result<String> {
    let cfg = ModelConfig::tiny();
    let model = PolicyModel::new(cfg.clone(), &mut stream(0, "verify/grad"))?;
    let targets: Vec<u32> = (0..cfg.chunk_len).map(|i| (i % cfg.num_classes) as u32).collect();
    let masked_set = vec![0, 1, 3];
    let mut corrupted = targets.clone();
    for &i in &masked_set {
        corrupted[i] = cfg.mask_id();
    }
    let example = MaskedExample {
        context: vec![1; cfg.context_len],
        corrupted,
        targets,
        masked_set,
    };
    let report = model.grad_check(&example, 1e-4, None)?;
    ensure(report.max_relative_error < 1e-4, || {
        format!("max relative error {:e} at parameter {}", report.max_relative_error, report.worst_param)
    })?;
    Ok(format!(
        "{} parameters, max relative error {:.2e}",
        report.checked, report.max_relative_error
    ))
}

fn decode_oracle_suite() -> Result<String> {
    let cases = TabulatedCase::generate(50, 0);
    for case in &cases {
        let model = case.model()?;
        let config = DecodeConfig {
            total_rounds: case.rounds,
            scoring: case.scoring,
            temperature_mode: TemperatureMode::Hard,
            remask: RemaskFlags::OFF,
            ..Default::default()
        };
        for c in 0..case.contexts as u32 {
            let (chunk, _) = decode(&model, &[c], &config)?;
            let oracle = exhaustive_decode(&model, &[c], &config)?;
            ensure(chunk.tokens == oracle.tokens, || format!("case {case:?}, context {c} disagrees"))?;
        }
    }
    Ok(format!("{} tabulated models agree", cases.len()))
}

fn nfe_suite() -> Result<String> {
    let cfg = ModelConfig {
        num_classes: 256,
        chunk_len: 56,
        embed_dim: 8,
        heads: 2,
        ff_dim: 16,
        layers: 1,
        ..ModelConfig::default()
    };
    let model = CountingModel::new(PolicyModel::new(cfg, &mut seeded(0))?);
    let (_, trace) = decode(&model, &[0, 1, 2, 3], &DecodeConfig::default())?;
    let diffusion = model.calls();
    model.reset();
    let (_, ar) = ar_baseline_decode(&model, &[0, 1, 2, 3])?;
    ensure(diffusion == 12 && trace.nfe == 12 && ar == 56 && model.calls() == 56, || {
        format!("diffusion {diffusion}, ar {ar}")
    })?;
    Ok(format!("T=12 forwards vs 56, ratio {:.2}", ar as f64 / diffusion as f64))
}

fn invariant_suite() -> Result<String> {
    let mut rng = stream(0, "verify/invariants");
    let episodes = 300;
    for e in 0..episodes {
        let case = &TabulatedCase::generate(1, e)[0];
        let model = case.model()?;
        let config = random_decode_config(&mut rng);
        let context = rng.random_range(0..case.contexts) as u32;
        check_decode(&model, &[context], &config)
            .map_err(|err| Error::Invariant(format!("episode {e}: {err}")))?;
    }
    Ok(format!("{episodes} randomized episodes, no violations"))
}

fn tokenizer_suite() -> Result<String> {
    let mut rng = stream(0, "verify/tokenizer");
    let samples: Vec<f64> = (0..5000).map(|_| rng.random_range(-1.0..1.0) * rng.random::<f64>()).collect();
    let gripper: Vec<f64> = (0..5000).map(|i| (i % 2) as f64).collect();
    let spec = fit_bins_with_layout(&[samples, gripper], 256, &[DimLayout::Quantile, DimLayout::Binary])?;
    let edges = spec.edges(0);
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    let width = spec.bins[0].max_bin_width();
    for _ in 0..20_000 {
        let x = rng.random_range(lo..hi);
        let g: f64 = rng.random();
        let chunk = spec.tokenize_chunk(&[vec![x, g]])?;
        let back = spec.detokenize_chunk(&chunk)?;
        ensure((back[0][0] - x).abs() <= width, || format!("round trip of {x}"))?;
        ensure(spec.tokenize_chunk(&back)? == chunk, || format!("idempotence at {x}"))?;
        ensure(back[0][1] == if g >= 0.5 { 1.0 } else { 0.0 }, || format!("gripper {g}"))?;
    }
    Ok("20000 values round-trip within one bin".into())
}

/// Every suite, in a fixed order.
pub fn run_all() -> Vec<SuiteResult> {
    vec![
        suite("schedule", schedule_suite),
        suite("forward_marginal_oracle", marginal_suite),
        suite("masked_ce", ce_suite),
        suite("grad_check", grad_suite),
        suite("decode_oracle", decode_oracle_suite),
        suite("nfe", nfe_suite),
        suite("decoder_invariants", invariant_suite),
        suite("tokenizer", tokenizer_suite),
    ]
}
