//! Schedules, forward corruption, the masked objective and the tokenizer.

use std::f64::consts::PI;

use diffact_core::codec::{fit_bins, fit_bins_with_layout, DimLayout};
use diffact_core::diffusion::{corrupt_bernoulli, corrupt_fixed_count, cumulative_beta, forward_marginal, masked_ce};
use diffact_core::oracle::{absorbing_matrix, enumerate_forward_marginal};
use diffact_core::rng::{derive_seed, seeded};
use diffact_core::schedule::{eta_abs, gamma, keep_count_for_gamma, tau};
use diffact_core::{ActionChunk, MaskSchedule, PosteriorMatrix, ScheduleKind, TemperatureMode, ThresholdSchedule};
use proptest::prelude::*;

#[test]
fn cosine_schedule_hits_its_landmarks() {
    let g = |t| gamma(t, ScheduleKind::Cosine).unwrap();
    assert_eq!(g(0.0), 1.0);
    assert!((g(0.5) - (PI / 4.0).cos()).abs() < 1e-12);
    assert!((g(2.0 / 3.0) - 0.5).abs() < 1e-12);
}

#[test]
fn twelve_round_schedule_for_a_56_token_chunk() {
    // ceil((1 - cos(pi r / 24)) * 56), written out independently.
    let s = MaskSchedule::new(ScheduleKind::Cosine, 12, 56);
    for r in 0..12 {
        let t = (r + 1) as f64 / 12.0;
        let want = if r == 11 {
            56
        } else {
            (((1.0 - (PI * t / 2.0).cos()) * 56.0) - 1e-9).ceil().max(1.0) as usize
        };
        assert_eq!(s.keep_target_after_round(r), want, "round {r}");
    }
}

#[test]
fn temperature_and_threshold_schedules() {
    assert_eq!(tau(0.25, TemperatureMode::Decay, 9.0, ScheduleKind::Cosine).unwrap(), 0.75);
    assert_eq!(tau(0.25, TemperatureMode::Hard, 9.0, ScheduleKind::Cosine).unwrap(), 0.0);
    assert_eq!(tau(0.25, TemperatureMode::Fixed, 0.7, ScheduleKind::Cosine).unwrap(), 0.7);
    let g = tau(0.5, TemperatureMode::Gamma, 0.0, ScheduleKind::Cosine).unwrap();
    assert!((g - (PI / 4.0).cos()).abs() < 1e-12);
    assert!(tau(1.0, TemperatureMode::Decay, 0.0, ScheduleKind::Cosine).is_err());
    let th = ThresholdSchedule::default();
    assert_eq!(eta_abs(0, 12, &th), th.eta_abs_start);
    // Linear in t = r / T.
    assert!((eta_abs(6, 12, &th) - 0.45).abs() < 1e-12);
    assert!((eta_abs(12, 12, &th) - th.eta_abs_end).abs() < 1e-12);
}

#[test]
fn dense_absorbing_matrix_is_stochastic() {
    for beta in [0.0, 0.3, 1.0] {
        let m = absorbing_matrix(beta, 5);
        for row in &m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert_eq!(m[4][4], 1.0);
    }
}

#[test]
fn masked_ce_matches_closed_forms() {
    let k = 256;
    let targets = ActionChunk::new((0..56).map(|i| (i * 31 % k) as u32).collect(), 8, 7, k).unwrap();
    let uniform = PosteriorMatrix::from_flat(56, k, vec![1.0 / k as f64; 56 * k]).unwrap();
    for m in [0, 1, 17, 56] {
        let masked: Vec<usize> = (0..m).collect();
        let loss = masked_ce(&uniform, &targets, &masked).unwrap();
        assert!((loss - m as f64 * (k as f64).ln()).abs() < 1e-9, "m = {m}: {loss}");
    }
    let mut onehot = vec![0.0; 56 * k];
    for (i, &t) in targets.tokens.iter().enumerate() {
        onehot[i * k + t as usize] = 1.0;
    }
    let perfect = PosteriorMatrix::from_flat(56, k, onehot).unwrap();
    assert_eq!(masked_ce(&perfect, &targets, &(0..56).collect::<Vec<_>>()).unwrap(), 0.0);
}

#[test]
fn bernoulli_corruption_rate_matches_beta_bar() {
    let chunk = ActionChunk::new(vec![1; 1000], 1000, 1, 4).unwrap();
    let mut rng = seeded(3);
    let n = 200;
    let masked: usize = (0..n)
        .map(|_| corrupt_bernoulli(&chunk, 0.3, &mut rng).unwrap().masked_set.len())
        .sum();
    let rate = masked as f64 / (n * 1000) as f64;
    // Binomial standard error is about 0.001.
    assert!((rate - 0.3).abs() < 0.005, "{rate}");
}

#[test]
fn seed_derivation_is_stable() {
    assert_eq!(derive_seed(0, "data"), derive_seed(0, "data"));
    assert_ne!(derive_seed(0, "data"), derive_seed(0, "init"));
    assert_ne!(derive_seed(0, "data"), derive_seed(1, "data"));
}

proptest! {
    #[test]
    fn gamma_is_monotone_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let (ga, gb) = (gamma(a, kind).unwrap(), gamma(b, kind).unwrap());
            prop_assert!((0.0..=1.0).contains(&ga));
            if a < b {
                prop_assert!(ga >= gb);
            }
        }
    }

    #[test]
    fn keep_counts_grow_and_complete(rounds in 1usize..30, len in 1usize..80, linear in any::<bool>()) {
        let kind = if linear { ScheduleKind::Linear } else { ScheduleKind::Cosine };
        let s = MaskSchedule::new(kind, rounds, len);
        let counts: Vec<usize> = (0..rounds).map(|r| s.keep_target_after_round(r)).collect();
        prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(counts.iter().all(|&c| (1..=len).contains(&c)));
        prop_assert_eq!(counts[rounds - 1], len);
    }

    #[test]
    fn keep_count_brackets_the_unmasked_fraction(g in 0.0f64..=1.0, len in 1usize..100) {
        let c = keep_count_for_gamma(g, len);
        let exact = (1.0 - g) * len as f64;
        prop_assert!(c >= 1 && c <= len);
        prop_assert!(c as f64 >= exact - 1e-6);
        prop_assert!((c as f64) < exact.max(1.0) + 1.0);
    }

    #[test]
    fn closed_form_marginal_equals_matrix_product(
        vocab in 2usize..30,
        token_frac in 0.0f64..1.0,
        betas in prop::collection::vec(0.0f64..=1.0, 0..10),
    ) {
        let token = ((token_frac * vocab as f64) as usize).min(vocab - 1) as u32;
        let dense = enumerate_forward_marginal(token, &betas, vocab).unwrap();
        let closed = forward_marginal(token, &betas, vocab).unwrap();
        for (a, b) in dense.probs.iter().zip(&closed.probs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let bar = cumulative_beta(&betas);
        if (token as usize) < vocab - 1 {
            prop_assert!((closed.mask_prob() - bar).abs() < 1e-15);
        }
    }

    #[test]
    fn fixed_count_corruption_masks_exactly(g in 0.01f64..=1.0, len in 1usize..60, seed in any::<u64>()) {
        let chunk = ActionChunk::new((0..len).map(|i| (i % 3) as u32).collect(), len, 1, 3).unwrap();
        let out = corrupt_fixed_count(&chunk, g, &mut seeded(seed)).unwrap();
        let want = ((g * len as f64).round() as usize).min(len);
        prop_assert_eq!(out.masked_set.len(), want);
        for i in 0..len {
            let masked = out.masked_set.contains(&i);
            prop_assert_eq!(out.corrupted.tokens[i] == 3, masked);
            if !masked {
                prop_assert_eq!(out.corrupted.tokens[i], chunk.tokens[i]);
            }
        }
    }

    #[test]
    fn uniform_posterior_loss_is_count_times_log_k(k in 2usize..50, m_frac in 0.0f64..=1.0, len in 1usize..30) {
        let targets = ActionChunk::new((0..len).map(|i| (i % k) as u32).collect(), len, 1, k).unwrap();
        let uniform = PosteriorMatrix::from_flat(len, k, vec![1.0 / k as f64; len * k]).unwrap();
        let m = (m_frac * len as f64) as usize;
        let masked: Vec<usize> = (0..m).collect();
        let loss = masked_ce(&uniform, &targets, &masked).unwrap();
        prop_assert!((loss - m as f64 * (k as f64).ln()).abs() < 1e-9);
    }
}

fn quantile_spec(seed: u64) -> diffact_core::TokenizerSpec {
    let mut rng = seeded(seed);
    use rand::Rng as _;
    let a: Vec<f64> = (0..4000).map(|_| rng.random_range(-2.0..3.0)).collect();
    let b: Vec<f64> = (0..4000).map(|_| rng.random::<f64>().powi(3)).collect();
    let grip: Vec<f64> = (0..4000).map(|i| (i % 3 == 0) as u8 as f64).collect();
    fit_bins(&[a, b, grip], 256, Some(2)).unwrap()
}

#[test]
fn hundred_thousand_values_round_trip() {
    use rand::Rng as _;
    let spec = quantile_spec(1);
    let mut rng = seeded(2);
    for d in 0..2 {
        let edges = spec.edges(d);
        let (lo, hi) = (edges[0], edges[256]);
        let width = spec.bins[d].max_bin_width();
        let mut prev: Option<(f64, u32)> = None;
        let mut xs: Vec<f64> = (0..50_000).map(|_| rng.random_range(lo..=hi)).collect();
        xs.sort_by(f64::total_cmp);
        for x in xs {
            let mut row = vec![0.0, 0.0, 0.0];
            row[d] = x;
            let chunk = spec.tokenize_chunk(&[row]).unwrap();
            let back = spec.detokenize_chunk(&chunk).unwrap();
            assert!((back[0][d] - x).abs() <= width, "dim {d}: {x} -> {}", back[0][d]);
            assert_eq!(spec.tokenize_chunk(&back).unwrap(), chunk, "idempotence at {x}");
            let t = chunk.tokens[d];
            if let Some((px, pt)) = prev {
                assert!(px <= x && pt <= t, "monotonicity at {x}");
            }
            prev = Some((x, t));
        }
    }
}

#[test]
fn gripper_binarization_is_exact() {
    let spec = quantile_spec(3);
    for (g, want_token, want_value) in [(0.0, 0, 0.0), (0.49, 0, 0.0), (0.5, 1, 1.0), (1.0, 1, 1.0), (-3.0, 0, 0.0)] {
        let chunk = spec.tokenize_chunk(&[vec![0.0, 0.0, g]]).unwrap();
        assert_eq!(chunk.tokens[2], want_token, "{g}");
        assert_eq!(spec.detokenize_chunk(&chunk).unwrap()[0][2], want_value);
    }
}

#[test]
fn out_of_range_values_clip_to_edge_bins() {
    let spec = fit_bins_with_layout(&[(0..1000).map(|i| i as f64).collect()], 16, &[DimLayout::Quantile]).unwrap();
    let lo = spec.tokenize_chunk(&[vec![-1e9]]).unwrap();
    let hi = spec.tokenize_chunk(&[vec![1e9]]).unwrap();
    assert_eq!((lo.tokens[0], hi.tokens[0]), (0, 15));
}

proptest! {
    #[test]
    fn tokenizer_json_round_trip_is_exact(seed in 0u64..20) {
        let spec = quantile_spec(seed);
        let back = diffact_core::TokenizerSpec::from_json(&spec.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.checksum(), spec.checksum());
        prop_assert_eq!(back, spec);
    }
}
