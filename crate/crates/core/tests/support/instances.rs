//! Seeded random problem instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SvmInstance {
    pub points: Vec<Vec<f64>>,
    pub queries: Vec<Vec<f64>>,
    pub nu: f64,
    pub gamma: f64,
}

/// Instance `seed`: `n` in `[5, 20]`, 2-D points in `[-2, 2]²`, ten queries
/// in `[-3, 3]²`, γ = 1, ν alternating between 0.1 and 0.5.
pub fn svm_instance(seed: u64) -> SvmInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + seed);
    let n = rng.gen_range(5..=20);
    let points = (0..n)
        .map(|_| vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
        .collect();
    let queries = (0..10)
        .map(|_| vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
        .collect();
    SvmInstance {
        points,
        queries,
        nu: if seed.is_multiple_of(2) { 0.1 } else { 0.5 },
        gamma: 1.0,
    }
}

/// Gaussian matrix with `n` in `[5, 60]`, `p` in `[2, 200]` and per-column
/// scales spread over two decades.
pub fn pca_instance(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xca_0000 + seed);
    let n = rng.gen_range(5..=60);
    let p = rng.gen_range(2..=200);
    let scales: Vec<f64> = (0..p)
        .map(|_| 10f64.powf(rng.gen_range(-1.0..1.0)))
        .collect();
    (0..n)
        .map(|_| {
            scales
                .iter()
                .map(|s| {
                    let g: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
                    s * g
                })
                .collect()
        })
        .collect()
}

/// A tight 1-D cluster of `n` points plus one point far outside it (last).
pub fn cluster_with_outlier(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0071_0000 + seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    v.push(rng.gen_range(20.0..30.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 });
    v
}
