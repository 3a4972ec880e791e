mod support;

use proptest::prelude::*;
use raywatch::features::{FeatureMatrix, PcaRoute, PcaTransform};
use support::instances::pca_instance;
use support::pca_oracle::{covariance_pca, sign_free_distance};

fn components(p: &PcaTransform<f64>) -> Vec<Vec<f64>> {
    (0..p.k()).map(|j| p.component(j).to_vec()).collect()
}

fn orthonormality_error(c: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..c.len() {
        for j in 0..c.len() {
            let d: f64 = c[i].iter().zip(&c[j]).map(|(a, b)| a * b).sum();
            worst = worst.max((d - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    worst
}

/// Components whose eigenvalue is separated from its neighbours; a
/// near-degenerate pair only defines a subspace.
fn well_separated(v: &[f64]) -> Vec<usize> {
    (0..v.len())
        .filter(|&j| {
            let gap_prev = if j > 0 {
                v[j - 1] - v[j]
            } else {
                f64::INFINITY
            };
            let gap_next = if j + 1 < v.len() {
                v[j] - v[j + 1]
            } else {
                f64::INFINITY
            };
            gap_prev.min(gap_next) > 1e-3 * v[0]
        })
        .collect()
}

#[test]
fn gram_route_matches_covariance_route_and_dense_oracle() {
    for seed in 0..20 {
        let rows = pca_instance(seed);
        let (n, p) = (rows.len(), rows[0].len());
        let k = (n - 1).min(p);
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let gram = PcaTransform::fit_with(&x, k, PcaRoute::Gram).unwrap();
        let cov = PcaTransform::fit_with(&x, k, PcaRoute::Covariance).unwrap();
        let reference = covariance_pca(&rows, k);
        assert_eq!(gram.k(), k, "seed {seed}");
        let gc = components(&gram);
        for j in well_separated(&reference.variances) {
            let d = sign_free_distance(&gc[j], &reference.components[j]);
            assert!(d <= 1e-6, "seed {seed} (n={n}, p={p}) component {j}: {d:e}");
            let d = sign_free_distance(&gc[j], cov.component(j));
            assert!(
                d <= 1e-6,
                "seed {seed} component {j} vs covariance route: {d:e}"
            );
        }
        assert!(orthonormality_error(&gc) <= 1e-8, "seed {seed}");
        let ev = gram.explained_variance();
        assert!(ev.windows(2).all(|w| w[0] >= w[1]), "seed {seed}");
        for (a, b) in ev.iter().zip(&reference.variances) {
            assert!(
                (a - b).abs() <= 1e-8 * reference.variances[0].max(1.0),
                "seed {seed}"
            );
        }
    }
}

#[test]
fn fit_transform_scores_match_projection() {
    let rows = pca_instance(4);
    let x = FeatureMatrix::from_rows(&rows).unwrap();
    let k = 5.min(x.n() - 1);
    let (pca, scores) = PcaTransform::fit_transform(&x, k).unwrap();
    let projected = pca.project(&x).unwrap();
    for (a, b) in scores.values().iter().zip(projected.values()) {
        assert!((a - b).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn components_are_orthonormal_and_sorted(seed in 0u64..10_000, k in 1usize..8) {
        let rows = pca_instance(seed);
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let k = k.min(x.n() - 1).min(x.p());
        let pca = PcaTransform::fit(&x, k).unwrap();
        prop_assert!(orthonormality_error(&components(&pca)) <= 1e-8);
        prop_assert!(pca.explained_variance().windows(2).all(|w| w[0] >= w[1]));
        for j in 0..pca.k() {
            let c = pca.component(j);
            let big = c.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            prop_assert!(big >= 0.0);
        }
    }
}
