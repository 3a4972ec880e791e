mod support;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raywatch::features::FeatureMatrix;
use raywatch::iforest::{
    average_path_length, score_from_path, IForestModel, IForestParams, MaxSamples,
};
use support::instances::cluster_with_outlier;

/// c(n) with the exact harmonic number in place of `ln + γ`.
fn c_harmonic(n: usize) -> f64 {
    let h: f64 = (1..n).map(|i| 1.0 / i as f64).sum();
    2.0 * h - 2.0 * (n - 1) as f64 / n as f64
}

#[test]
fn normalizer_values() {
    assert_eq!(average_path_length(0), 0.0);
    assert_eq!(average_path_length(1), 0.0);
    // 2 (ln 1 + γ_E) − 2·(1/2) with γ_E to ten places.
    let c2 = 2.0 * (1.0f64.ln() + 0.577_215_664_9) - 1.0;
    assert!((average_path_length(2) - c2).abs() < 1e-12);
    assert!((average_path_length(2) - 0.15443).abs() < 1e-5);
    // ln(m) + γ falls short of H(m) by about 1/(2m).
    for n in [64usize, 256, 4096] {
        let gap = average_path_length(n) - c_harmonic(n);
        let expected = -1.0 / (n - 1) as f64;
        assert!(
            (gap - expected).abs() < 0.05 * expected.abs(),
            "n = {n}: gap {gap}"
        );
    }
}

#[test]
fn mean_path_equal_to_normalizer_scores_half() {
    for n in [2usize, 3, 10, 256, 100_000] {
        let c = average_path_length(n);
        assert_eq!(score_from_path(c, c), 0.5);
    }
    assert_eq!(score_from_path(3.0, 0.0), 0.5);
}

#[test]
fn scores_in_open_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..300)
        .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let x = FeatureMatrix::from_rows(&rows).unwrap();
    let model = IForestModel::fit(
        &x,
        &IForestParams {
            trees: 50,
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    for _ in 0..10_000 {
        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let s = model.anomaly_score(&q).unwrap();
        assert!(s > 0.0 && s < 1.0, "{s}");
    }
}

#[test]
fn far_outlier_scores_highest() {
    let mut hits = 0;
    for seed in 0..100 {
        let v = cluster_with_outlier(seed, 100);
        let rows: Vec<Vec<f64>> = v.iter().map(|&a| vec![a]).collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let model = IForestModel::fit(
            &x,
            &IForestParams {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let scores = model.score_batch(&x).unwrap();
        let (last, rest) = scores.split_last().unwrap();
        hits += usize::from(rest.iter().all(|s| s < last));
    }
    assert!(hits >= 95, "{hits}/100");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn score_monotone_in_path(c in 0.1f64..40.0, a in 0.0f64..60.0, b in 0.0f64..60.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(score_from_path(lo, c) >= score_from_path(hi, c));
    }

    #[test]
    fn fit_is_deterministic(seed in 0u64..1000, psi in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let p = IForestParams { trees: 10, max_samples: MaxSamples::Count(psi), seed, ..Default::default() };
        let a = IForestModel::fit(&x, &p).unwrap();
        let b = IForestModel::fit(&x, &p).unwrap();
        prop_assert_eq!(a.score_batch(&x).unwrap(), b.score_batch(&x).unwrap());
    }
}
