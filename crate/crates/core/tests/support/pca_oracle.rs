//! Principal components from a dense covariance eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};

pub struct Reference {
    /// Unit components, one per entry, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

pub fn covariance_pca(rows: &[Vec<f64>], k: usize) -> Reference {
    let (n, p) = (rows.len(), rows[0].len());
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let means = x.row_mean();
    let mut xc = x.clone();
    for mut r in xc.row_iter_mut() {
        r -= &means;
    }
    let cov = xc.transpose() * &xc / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let order = &order[..k];
    Reference {
        components: order
            .iter()
            .map(|&j| eig.eigenvectors.column(j).iter().copied().collect())
            .collect(),
        variances: order.iter().map(|&j| eig.eigenvalues[j]).collect(),
    }
}

/// Largest entrywise gap between `a` and `±b`, taking the better sign.
pub fn sign_free_distance(a: &[f64], b: &[f64]) -> f64 {
    let plus = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let minus = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x + y).abs())
        .fold(0.0, f64::max);
    plus.min(minus)
}
