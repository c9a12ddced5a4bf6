//! Acceptance harness: prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::f64::consts::FRAC_PI_4;
use std::time::{Duration, Instant};

use rand::Rng as _;

use diffact_core::bench::{evaluate, generate_dataset, run_ablation, train_policy, AblationGrid, BenchConfig, TrainingRecipe};
use diffact_core::codec::{fit_bins_with_layout, DimLayout};
use diffact_core::decoder::decode;
use diffact_core::diffusion::{forward_marginal, masked_ce};
use diffact_core::model::MaskedExample;
use diffact_core::oracle::{ar_baseline_decode, enumerate_forward_marginal, exhaustive_decode, CountingModel, TabulatedCase};
use diffact_core::rng::{derive_seed, seeded, stream};
use diffact_core::schedule::gamma;
use diffact_core::verify::{check_decode, random_decode_config};
use diffact_core::{ActionChunk, DecodeConfig, ModelConfig, PolicyModel, PosteriorMatrix, RemaskFlags, ScheduleKind, ScoringMode, TemperatureMode};

type Outcome = Result<String, String>;

const ROOT_SEED: u64 = 0;

fn gate(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn schedule_exactness() -> Outcome {
    let g = |t| gamma(t, ScheduleKind::Cosine).map_err(|e| e.to_string());
    let errs = [(g(0.0)? - 1.0).abs(), (g(0.5)? - FRAC_PI_4.cos()).abs(), (g(2.0 / 3.0)? - 0.5).abs()];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    gate(worst < 1e-12, format!("max error {worst:.1e}"))
}

fn forward_marginal_oracle() -> Outcome {
    let mut rng = stream(ROOT_SEED, "acceptance/marginal");
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let vocab = rng.random_range(2..=64);
        let token = rng.random_range(0..vocab) as u32;
        let betas: Vec<f64> = (0..rng.random_range(1..=16)).map(|_| rng.random::<f64>()).collect();
        let dense = enumerate_forward_marginal(token, &betas, vocab).map_err(|e| e.to_string())?;
        let closed = forward_marginal(token, &betas, vocab).map_err(|e| e.to_string())?;
        for (a, b) in dense.probs.iter().zip(&closed.probs) {
            worst = worst.max((a - b).abs());
        }
    }
    gate(worst < 1e-12, format!("100 cases, max deviation {worst:.1e}"))
}

fn masked_ce_values() -> Outcome {
    let (l, k) = (56, 256);
    let targets = ActionChunk::new((0..l).map(|i| (i * 31 % k) as u32).collect(), 8, 7, k).map_err(|e| e.to_string())?;
    let masked: Vec<usize> = (0..l).filter(|i| i % 4 != 1).collect();
    let uniform = PosteriorMatrix::from_flat(l, k, vec![1.0 / k as f64; l * k]).map_err(|e| e.to_string())?;
    let loss = masked_ce(&uniform, &targets, &masked).map_err(|e| e.to_string())?;
    let expected = masked.len() as f64 * (k as f64).ln();
    let mut onehot = vec![0.0; l * k];
    for (i, &t) in targets.tokens.iter().enumerate() {
        onehot[i * k + t as usize] = 1.0;
    }
    let perfect = PosteriorMatrix::from_flat(l, k, onehot).map_err(|e| e.to_string())?;
    let zero = masked_ce(&perfect, &targets, &masked).map_err(|e| e.to_string())?;
    gate(
        (loss - expected).abs() < 1e-9 && zero == 0.0,
        format!("uniform {loss:.9} vs {expected:.9}, perfect {zero}"),
    )
}

fn gradient_check() -> Outcome {
    let cfg = ModelConfig::tiny();
    let model = PolicyModel::new(cfg.clone(), &mut stream(ROOT_SEED, "acceptance/grad")).map_err(|e| e.to_string())?;
    let targets: Vec<u32> = (0..cfg.chunk_len).map(|i| ((i * 3 + 1) % cfg.num_classes) as u32).collect();
    let masked_set = vec![0, 2, 3];
    let mut corrupted = targets.clone();
    for &i in &masked_set {
        corrupted[i] = cfg.mask_id();
    }
    let example = MaskedExample {
        context: (0..cfg.context_len).map(|i| (i % cfg.context_vocab) as u32).collect(),
        corrupted,
        targets,
        masked_set,
    };
    let report = model.grad_check(&example, 1e-4, None).map_err(|e| e.to_string())?;
    gate(
        report.max_relative_error < 1e-4,
        format!("{} parameters, max relative error {:.2e}", report.checked, report.max_relative_error),
    )
}

fn decode_oracle() -> Outcome {
    let cases = TabulatedCase::generate(50, derive_seed(ROOT_SEED, "acceptance/oracle"));
    let mut compared = 0;
    for case in &cases {
        let model = case.model().map_err(|e| e.to_string())?;
        let config = DecodeConfig {
            total_rounds: case.rounds,
            scoring: case.scoring,
            temperature_mode: TemperatureMode::Hard,
            remask: RemaskFlags::OFF,
            ..Default::default()
        };
        for c in 0..case.contexts as u32 {
            let (chunk, _) = decode(&model, &[c], &config).map_err(|e| e.to_string())?;
            let oracle = exhaustive_decode(&model, &[c], &config).map_err(|e| e.to_string())?;
            if chunk.tokens != oracle.tokens {
                return Err(format!("case {case:?} context {c}: {:?} vs {:?}", chunk.tokens, oracle.tokens));
            }
            compared += 1;
        }
    }
    gate(true, format!("{} models, {compared} decodes bit-identical", cases.len()))
}

fn nfe_claim() -> Outcome {
    let cfg = ModelConfig {
        num_classes: 256,
        chunk_len: 56,
        embed_dim: 8,
        heads: 2,
        ff_dim: 16,
        layers: 1,
        ..ModelConfig::default()
    };
    let model = CountingModel::new(PolicyModel::new(cfg, &mut seeded(ROOT_SEED)).map_err(|e| e.to_string())?);
    let config = DecodeConfig {
        total_rounds: 12,
        ..Default::default()
    };
    let (_, trace) = decode(&model, &[0, 1, 2, 3], &config).map_err(|e| e.to_string())?;
    let diffusion = model.calls();
    model.reset();
    let (_, ar) = ar_baseline_decode(&model, &[0, 1, 2, 3]).map_err(|e| e.to_string())?;
    let ratio = ar as f64 / diffusion as f64;
    gate(
        diffusion == 12 && trace.nfe == 12 && ar == 56 && model.calls() == 56 && format!("{ratio:.1}") == "4.7",
        format!("{diffusion} forwards vs {ar}, ratio {ratio:.2}"),
    )
}

fn decoder_invariants() -> Outcome {
    let mut rng = stream(ROOT_SEED, "acceptance/invariants");
    let episodes = 1000;
    for e in 0..episodes {
        let case = &TabulatedCase::generate(1, derive_seed(ROOT_SEED, &format!("acceptance/episode/{e}")))[0];
        let model = case.model().map_err(|err| err.to_string())?;
        let config = random_decode_config(&mut rng);
        let context = rng.random_range(0..case.contexts) as u32;
        check_decode(&model, &[context], &config).map_err(|err| format!("episode {e}: {err}"))?;
    }
    gate(true, format!("{episodes} randomized episodes, 0 violations"))
}

fn tokenizer_properties() -> Outcome {
    let mut rng = stream(ROOT_SEED, "acceptance/tokenizer");
    let samples: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>().powi(2) * 2.0 - 1.0).collect();
    let gripper: Vec<f64> = (0..20_000).map(|i| (i % 2) as f64).collect();
    let spec = fit_bins_with_layout(&[samples, gripper], 256, &[DimLayout::Quantile, DimLayout::Binary])
        .map_err(|e| e.to_string())?;
    let edges = spec.edges(0);
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    let width = spec.bins[0].max_bin_width();
    let mut values: Vec<f64> = (0..100_000).map(|_| rng.random_range(lo..=hi)).collect();
    values.sort_by(f64::total_cmp);
    let mut prev = 0;
    for &x in &values {
        let g = rng.random::<f64>();
        let chunk = spec.tokenize_chunk(&[vec![x, g]]).map_err(|e| e.to_string())?;
        let back = spec.detokenize_chunk(&chunk).map_err(|e| e.to_string())?;
        if (back[0][0] - x).abs() > width {
            return Err(format!("round trip of {x} off by {}", (back[0][0] - x).abs()));
        }
        if spec.tokenize_chunk(&back).map_err(|e| e.to_string())? != chunk {
            return Err(format!("not idempotent at {x}"));
        }
        if chunk.tokens[0] < prev {
            return Err(format!("not monotone at {x}"));
        }
        prev = chunk.tokens[0];
        let want = if g >= 0.5 { 1.0 } else { 0.0 };
        if back[0][1] != want {
            return Err(format!("gripper {g} decoded to {}", back[0][1]));
        }
    }
    gate(true, format!("100000 values, max bin width {width:.2e}"))
}

struct Trained {
    model: PolicyModel,
    data: diffact_core::bench::Dataset,
    bench: BenchConfig,
}

fn end_to_end(trained: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let bench = BenchConfig::default();
    let data = generate_dataset(1000, derive_seed(ROOT_SEED, "data"), &bench).map_err(|e| e.to_string())?;
    let recipe = TrainingRecipe::default();
    let (model, report) = train_policy(&data, &recipe, ROOT_SEED, |_, _| {}).map_err(|e| e.to_string())?;
    let tasks = data.held_out_tasks();
    let decode_cfg = DecodeConfig {
        seed: derive_seed(ROOT_SEED, "decode"),
        ..Default::default()
    };
    let eval = evaluate(&model, &data.tokenizer, &bench, &tasks, &decode_cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = format!(
        "held-out success {:.3} over {} tasks (threshold 0.9), final loss {:.2}, {:.0}s",
        eval.success_rate,
        eval.episodes,
        report.tail_mean(100),
        elapsed.as_secs_f64()
    );
    *trained = Some(Trained { model, data, bench });
    gate(eval.success_rate >= 0.9 && elapsed <= Duration::from_secs(15 * 60), detail)
}

fn ablation_shape(trained: &Option<Trained>) -> Outcome {
    let t = trained.as_ref().ok_or("no trained model")?;
    let tasks = t.data.held_out_tasks();
    let base = DecodeConfig {
        seed: derive_seed(ROOT_SEED, "decode"),
        ..Default::default()
    };
    let reports = run_ablation(&t.model, &t.data.tokenizer, &t.bench, &tasks, &AblationGrid::default(), &base)
        .map_err(|e| e.to_string())?;
    let cells: std::collections::HashSet<_> = reports.iter().map(|r| (r.strategy.clone(), r.temperature.clone())).collect();
    let paired = reports.iter().all(|r| r.task_digest == reports[0].task_digest && r.episodes == tasks.len());
    let max_conf = ScoringMode::MaxConfidence.label();
    let nfe_ok = reports
        .iter()
        .filter(|r| r.strategy == max_conf)
        .all(|r| r.outcomes.iter().all(|o| o.nfe == base.total_rounds));
    let rate = |s: &str, temp: &str| {
        reports
            .iter()
            .find(|r| r.strategy == s && r.temperature.starts_with(temp))
            .map(|r| r.success_rate)
            .unwrap_or(f64::NAN)
    };
    let one_shot = ScoringMode::OneShotParallel.label();
    let (mc_decay, os_decay, mc_hard) = (rate(max_conf, "decay"), rate(one_shot, "decay"), rate(max_conf, "hard"));
    let observation = format!(
        "observed max_conf {mc_decay:.3} vs one_shot {os_decay:.3} ({}), decay {mc_decay:.3} vs hard {mc_hard:.3} ({})",
        if mc_decay >= os_decay { "agrees" } else { "differs" },
        if mc_decay >= mc_hard { "agrees" } else { "differs" },
    );
    gate(
        reports.len() == 12 && cells.len() == 12 && paired && nfe_ok,
        format!("{} cells, paired {paired}, max_conf nfe=T {nfe_ok}; {observation}", cells.len()),
    )
}

fn main() {
    let mut trained = None;
    let mut failed = 0;
    let mut report = |n: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] #{n} {name}: {detail} [{secs:.1}s]");
    };
    report(1, "schedule exactness", &mut schedule_exactness);
    report(2, "forward-marginal oracle", &mut forward_marginal_oracle);
    report(3, "masked CE analytic values", &mut masked_ce_values);
    report(4, "gradient check", &mut gradient_check);
    report(5, "decode oracle equivalence", &mut decode_oracle);
    report(6, "NFE reduction", &mut nfe_claim);
    report(7, "decoder invariants", &mut decoder_invariants);
    report(8, "end-to-end learning", &mut || end_to_end(&mut trained));
    report(9, "ablation harness", &mut || ablation_shape(&trained));
    report(10, "tokenizer properties", &mut tokenizer_properties);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
