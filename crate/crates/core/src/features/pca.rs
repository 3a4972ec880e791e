use rayon::prelude::*;

use crate::container::{FormatError, RawMatrix, SectionFile};
use crate::scalar::{dot, Scalar};

use super::eigen::symmetric_eigen;
use super::{FeatureError, FeatureMatrix};

/// Principal-component basis fitted on a (scaled) feature matrix.
///
/// Components are stored one per row (`k x p`); each is unit length, the set
/// is orthonormal, and each component's largest-magnitude entry is
/// nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform<T> {
    means: Vec<T>,
    components: Vec<T>,
    k: usize,
    explained_variance: Vec<T>,
    total_variance: T,
    rank_deficient: bool,
}

/// Which eigenproblem the fit solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaRoute {
    /// `p < n` uses the covariance, otherwise the Gram matrix.
    Auto,
    /// `p x p` covariance eigendecomposition.
    Covariance,
    /// `n x n` inner-product matrix of the centred rows.
    Gram,
}

impl<T: Scalar> PcaTransform<T> {
    pub fn fit(x: &FeatureMatrix<T>, k: usize) -> Result<Self, FeatureError> {
        Self::fit_with(x, k, PcaRoute::Auto)
    }

    pub fn fit_with(x: &FeatureMatrix<T>, k: usize, route: PcaRoute) -> Result<Self, FeatureError> {
        Self::fit_inner(x, k, route).map(|(pca, _)| pca)
    }

    /// Fits and returns the training rows' scores. On the Gram route the
    /// scores come from the inner-product matrix instead of a second pass
    /// over the wide rows.
    pub fn fit_transform(
        x: &FeatureMatrix<T>,
        k: usize,
    ) -> Result<(Self, FeatureMatrix<T>), FeatureError> {
        let (pca, scores) = Self::fit_inner(x, k, PcaRoute::Auto)?;
        let scores = match scores {
            Some(z) => z,
            None => pca.project(x)?,
        };
        Ok((pca, scores))
    }

    fn fit_inner(
        x: &FeatureMatrix<T>,
        k: usize,
        route: PcaRoute,
    ) -> Result<(Self, Option<FeatureMatrix<T>>), FeatureError> {
        let (n, p) = (x.n(), x.p());
        let max_k = (n.saturating_sub(1)).min(p);
        if k == 0 || k > max_k {
            return Err(FeatureError::InvalidComponentCount { k, max: max_k });
        }
        let means = column_means(x);
        let use_gram = match route {
            PcaRoute::Auto => p >= n,
            PcaRoute::Covariance => false,
            PcaRoute::Gram => true,
        };
        let denom = T::lit((n - 1) as f64);

        let gram = use_gram.then(|| centered_gram(x, &means));
        let (eigvals, mut vectors, dim) = match &gram {
            Some(g) => {
                let eig = symmetric_eigen(g, n);
                (eig.values, eig.vectors, n)
            }
            None => {
                let eig = symmetric_eigen(&centered_cross_product(x, &means), p);
                (eig.values, eig.vectors, p)
            }
        };
        let total_variance = eigvals
            .iter()
            .fold(T::zero(), |acc, v| acc + v.max(T::zero()))
            / denom;

        let lambda_max = eigvals.first().copied().unwrap_or(T::zero()).max(T::zero());
        let cutoff = lambda_max * T::lit(100.0 * dim.max(p) as f64) * T::eps();
        let rank = eigvals
            .iter()
            .take_while(|&&v| v > cutoff && v > T::zero())
            .count();
        let kept = k.min(rank);
        let rank_deficient = kept < k;
        if rank_deficient {
            log::warn!("requested {k} principal components but the data has numerical rank {rank}");
        }
        if kept == 0 {
            return Err(FeatureError::RankDeficient { requested: k, rank });
        }
        let eigvals = &eigvals[..kept];
        vectors.truncate(kept);

        let (basis, scores) = match &gram {
            Some(g) => {
                // Component j is Xcᵀ w_j with w_j = u_j / sqrt(λ_j).
                let mut w: Vec<T> = vectors
                    .iter()
                    .zip(eigvals)
                    .flat_map(|(u, &l)| {
                        let s = l.sqrt();
                        u.iter().map(move |&v| v / s)
                    })
                    .collect();
                let ok = orthonormalize_coefficients(&mut w, g, n)
                    && orthonormalize_coefficients(&mut w, g, n);
                let mut basis = combine_rows(x, &means, &w);
                if !ok {
                    orthonormalize(&mut basis, p);
                }
                let flips: Vec<bool> = basis.chunks_exact_mut(p).map(canonicalize_sign).collect();
                let scores = ok.then(|| {
                    for (wj, &f) in w.chunks_exact_mut(n).zip(&flips) {
                        if f {
                            wj.iter_mut().for_each(|v| *v = -*v);
                        }
                    }
                    gram_scores(g, &w, n)
                });
                (basis, scores)
            }
            None => {
                let mut basis: Vec<T> = vectors.into_iter().flatten().collect();
                orthonormalize(&mut basis, p);
                for c in basis.chunks_exact_mut(p) {
                    canonicalize_sign(c);
                }
                (basis, None)
            }
        };
        let pca = Self {
            means,
            components: basis,
            k: kept,
            explained_variance: eigvals.iter().map(|&v| v / denom).collect(),
            total_variance,
            rank_deficient,
        };
        let scores = scores.map(|z| FeatureMatrix::new(n, kept, z)).transpose()?;
        Ok((pca, scores))
    }

    /// Retained component count (may be below the requested count when
    /// [`Self::rank_deficient`] is set).
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn input_width(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn component(&self, j: usize) -> &[T] {
        let p = self.input_width();
        &self.components[j * p..(j + 1) * p]
    }

    pub fn explained_variance(&self) -> &[T] {
        &self.explained_variance
    }

    /// Fraction of total variance carried by each retained component.
    pub fn explained_variance_ratio(&self) -> Vec<T> {
        if self.total_variance <= T::zero() {
            return vec![T::zero(); self.k];
        }
        self.explained_variance
            .iter()
            .map(|&v| v / self.total_variance)
            .collect()
    }

    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    pub fn project(&self, x: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>, FeatureError> {
        if x.p() != self.input_width() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.input_width(),
                found: x.p(),
            });
        }
        let out: Vec<Vec<T>> = x
            .rows()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|r| self.project_centered(r))
            .collect();
        FeatureMatrix::from_rows(&out)
    }

    pub fn project_row(&self, row: &[T]) -> Result<Vec<T>, FeatureError> {
        if row.len() != self.input_width() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.input_width(),
                found: row.len(),
            });
        }
        Ok(self.project_centered(row))
    }

    fn project_centered(&self, row: &[T]) -> Vec<T> {
        let centered: Vec<T> = row.iter().zip(&self.means).map(|(v, m)| *v - *m).collect();
        self.components
            .chunks_exact(self.input_width())
            .map(|c| dot(&centered, c))
            .collect()
    }

    pub fn write_sections(&self, file: &mut SectionFile, prefix: &str) {
        let p = self.input_width();
        let f = |v: &[T]| v.iter().map(|x| x.to_f64_lossless()).collect::<Vec<_>>();
        file.push_matrix(
            format!("{prefix}means"),
            RawMatrix::new(1, p, f(&self.means)),
        );
        file.push_matrix(
            format!("{prefix}components"),
            RawMatrix::new(self.k, p, f(&self.components)),
        );
        file.push_matrix(
            format!("{prefix}explained_variance"),
            RawMatrix::new(1, self.k, f(&self.explained_variance)),
        );
        file.push_scalars(
            format!("{prefix}scalars"),
            &[
                self.total_variance.to_f64_lossless(),
                if self.rank_deficient { 1.0 } else { 0.0 },
            ],
        );
    }

    pub fn read_sections(file: &SectionFile, prefix: &str) -> Result<Self, FeatureError> {
        let conv = |m: &RawMatrix| m.values.iter().map(|&v| T::lit(v)).collect::<Vec<_>>();
        let means = file.matrix(&format!("{prefix}means"))?;
        let comps = file.matrix(&format!("{prefix}components"))?;
        let ev = file.matrix(&format!("{prefix}explained_variance"))?;
        let scalars = file.scalars(&format!("{prefix}scalars"), 2)?;
        if comps.cols != means.values.len() || ev.values.len() != comps.rows {
            return Err(FeatureError::Format(FormatError::BadSection {
                name: format!("{prefix}components"),
                detail: "component shape disagrees with means".into(),
            }));
        }
        Ok(Self {
            means: conv(means),
            components: conv(comps),
            k: comps.rows,
            explained_variance: conv(ev),
            total_variance: T::lit(scalars[0]),
            rank_deficient: scalars[1] != 0.0,
        })
    }
}

fn column_means<T: Scalar>(x: &FeatureMatrix<T>) -> Vec<T> {
    let mut means = vec![T::zero(); x.p()];
    for row in x.rows() {
        for (m, v) in means.iter_mut().zip(row) {
            *m += *v;
        }
    }
    let n = T::lit(x.n() as f64);
    means.iter_mut().for_each(|m| *m /= n);
    means
}

/// Column block width for passes over wide rows.
const BLOCK: usize = 1024;

/// Centred copy of columns `lo..hi`, row-major `n x (hi - lo)`.
fn centered_block<T: Scalar>(x: &FeatureMatrix<T>, means: &[T], lo: usize, hi: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.n() * (hi - lo));
    for row in x.rows() {
        out.extend(row[lo..hi].iter().zip(&means[lo..hi]).map(|(v, m)| *v - *m));
    }
    out
}

/// Row-major `n x n` matrix of centred-row inner products, accumulated over
/// column blocks so only one block is ever held centred.
fn centered_gram<T: Scalar>(x: &FeatureMatrix<T>, means: &[T]) -> Vec<T> {
    let (n, p) = (x.n(), x.p());
    let mut g = vec![T::zero(); n * n];
    for lo in (0..p).step_by(BLOCK) {
        let hi = (lo + BLOCK).min(p);
        let w = hi - lo;
        let c = centered_block(x, means, lo, hi);
        g.par_chunks_mut(n).enumerate().for_each(|(i, gi)| {
            let ci = &c[i * w..(i + 1) * w];
            for j in 0..=i {
                gi[j] += dot(ci, &c[j * w..(j + 1) * w]);
            }
        });
    }
    for i in 0..n {
        for j in 0..i {
            g[j * n + i] = g[i * n + j];
        }
    }
    g
}

/// Row-major `p x p` matrix `Xcᵀ Xc`.
fn centered_cross_product<T: Scalar>(x: &FeatureMatrix<T>, means: &[T]) -> Vec<T> {
    let p = x.p();
    let centered: Vec<Vec<T>> = x
        .rows()
        .map(|r| r.iter().zip(means).map(|(v, m)| *v - *m).collect())
        .collect();
    let mut c = vec![T::zero(); p * p];
    c.par_chunks_mut(p).enumerate().for_each(|(a, out)| {
        for row in &centered {
            let ra = row[a];
            for (o, rb) in out.iter_mut().zip(row) {
                *o += ra * *rb;
            }
        }
    });
    c
}

/// `k x p` rows `Xcᵀ w_j` for the `k x n` coefficient rows `w`.
fn combine_rows<T: Scalar>(x: &FeatureMatrix<T>, means: &[T], w: &[T]) -> Vec<T> {
    let (n, p) = (x.n(), x.p());
    let k = w.len() / n;
    let mut out = vec![T::zero(); k * p];
    for lo in (0..p).step_by(BLOCK) {
        let hi = (lo + BLOCK).min(p);
        let bw = hi - lo;
        let c = centered_block(x, means, lo, hi);
        out.par_chunks_mut(p)
            .zip(w.par_chunks(n))
            .for_each(|(comp, wj)| {
                let seg = &mut comp[lo..hi];
                for (i, &wi) in wj.iter().enumerate() {
                    for (s, v) in seg.iter_mut().zip(&c[i * bw..(i + 1) * bw]) {
                        *s += wi * *v;
                    }
                }
            });
    }
    out
}

/// `M = W G Wᵀ` is the Gram matrix of the components `Xcᵀ w_j`. Replacing
/// `W` with `L⁻¹ W`, where `M = L Lᵀ`, makes them orthonormal (the same
/// result Gram-Schmidt gives) without touching the wide rows. Returns false
/// if `M` is not numerically positive definite.
fn orthonormalize_coefficients<T: Scalar>(w: &mut [T], g: &[T], n: usize) -> bool {
    let k = w.len() / n;
    let gw: Vec<Vec<T>> = w
        .par_chunks(n)
        .map(|wj| (0..n).map(|i| dot(&g[i * n..(i + 1) * n], wj)).collect())
        .collect();
    let mut m = vec![T::zero(); k * k];
    m.par_chunks_mut(k).enumerate().for_each(|(a, row)| {
        for b in 0..=a {
            row[b] = dot(&w[a * n..(a + 1) * n], &gw[b]);
        }
    });
    // In-place lower Cholesky factor.
    for j in 0..k {
        let mut d = m[j * k + j];
        for l in 0..j {
            d -= m[j * k + l] * m[j * k + l];
        }
        if d.is_nan() || d <= T::zero() {
            return false;
        }
        let d = d.sqrt();
        m[j * k + j] = d;
        for i in j + 1..k {
            let mut v = m[i * k + j];
            for l in 0..j {
                v -= m[i * k + l] * m[j * k + l];
            }
            m[i * k + j] = v / d;
        }
    }
    // Forward substitution, row by row.
    for j in 0..k {
        let (done, rest) = w.split_at_mut(j * n);
        let wj = &mut rest[..n];
        for l in 0..j {
            let f = m[j * k + l];
            for (a, b) in wj.iter_mut().zip(&done[l * n..(l + 1) * n]) {
                *a -= f * *b;
            }
        }
        let d = m[j * k + j];
        wj.iter_mut().for_each(|v| *v /= d);
    }
    true
}

/// Training-row scores `Xc Vᵀ = G Wᵀ`, row-major `n x k`.
fn gram_scores<T: Scalar>(g: &[T], w: &[T], n: usize) -> Vec<T> {
    let k = w.len() / n;
    let mut z = vec![T::zero(); n * k];
    z.par_chunks_mut(k).enumerate().for_each(|(i, zi)| {
        let gi = &g[i * n..(i + 1) * n];
        for (j, v) in zi.iter_mut().enumerate() {
            *v = dot(gi, &w[j * n..(j + 1) * n]);
        }
    });
    z
}

/// Two passes of modified Gram-Schmidt over the `k x p` rows.
fn orthonormalize<T: Scalar>(basis: &mut [T], p: usize) {
    let k = basis.len() / p;
    for _ in 0..2 {
        for j in 0..k {
            let (done, rest) = basis.split_at_mut(j * p);
            let cj = &mut rest[..p];
            for prev in done.chunks_exact(p) {
                let proj = dot(cj, prev);
                for (a, b) in cj.iter_mut().zip(prev) {
                    *a -= proj * *b;
                }
            }
            let norm = dot(cj, cj).sqrt();
            if norm > T::zero() {
                cj.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
}

/// Flips `c` so its first largest-magnitude entry is nonnegative. Returns
/// whether it flipped.
fn canonicalize_sign<T: Scalar>(c: &mut [T]) -> bool {
    let mut best = T::zero();
    let mut sign_neg = false;
    for v in c.iter() {
        if v.abs() > best {
            best = v.abs();
            sign_neg = *v < T::zero();
        }
    }
    if sign_neg {
        c.iter_mut().for_each(|v| *v = -*v);
    }
    sign_neg
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, p: usize, seed: u64) -> FeatureMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(n, p, (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rank_one_line() {
        let x = FeatureMatrix::new(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let pca = PcaTransform::fit(&x, 1).unwrap();
        let c = pca.component(0);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[0] - r).abs() < 1e-12 && (c[1] - r).abs() < 1e-12);
        assert!((pca.explained_variance_ratio()[0] - 1.0).abs() < 1e-12);
        // Signed distances along the line from the centroid (2, 2).
        let proj = pca.project(&x).unwrap();
        let s2 = 2f64.sqrt();
        for (got, want) in proj.values().iter().zip([-s2, 0.0, s2]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_request_is_flagged() {
        let x = FeatureMatrix::new(
            4,
            3,
            vec![1.0, 1.0, 0.0, 2.0, 2.0, 0.0, 3.0, 3.0, 0.0, 5.0, 5.0, 0.0],
        )
        .unwrap();
        let pca = PcaTransform::fit(&x, 2).unwrap();
        assert!(pca.rank_deficient());
        assert_eq!(pca.k(), 1);
    }

    #[test]
    fn component_count_bounds() {
        let x = random(5, 3, 1);
        assert!(matches!(
            PcaTransform::fit(&x, 0),
            Err(FeatureError::InvalidComponentCount { .. })
        ));
        assert!(matches!(
            PcaTransform::fit(&x, 4),
            Err(FeatureError::InvalidComponentCount { max: 3, .. })
        ));
        let wide = random(5, 30, 1);
        assert!(PcaTransform::fit(&wide, 5).is_err());
        assert_eq!(PcaTransform::fit(&wide, 4).unwrap().k(), 4);
    }

    #[test]
    fn mean_row_projects_to_zero() {
        let x = random(12, 40, 2);
        let pca = PcaTransform::fit(&x, 5).unwrap();
        let out = pca.project_row(pca.means()).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
        assert!(pca.project_row(&[0.0; 3]).is_err());
    }

    #[test]
    fn projected_variances_match_and_decorrelate() {
        let x = random(30, 80, 3);
        let pca = PcaTransform::fit(&x, 10).unwrap();
        let z = pca.project(&x).unwrap();
        let n = z.n() as f64;
        for a in 0..10 {
            for b in 0..10 {
                let cov: f64 = z.rows().map(|r| r[a] * r[b]).sum::<f64>() / (n - 1.0);
                if a == b {
                    assert!((cov - pca.explained_variance()[a]).abs() < 1e-8);
                } else {
                    assert!(cov.abs() < 1e-6);
                }
            }
        }
        for w in pca.explained_variance().windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn fit_transform_matches_project() {
        let x = random(25, 90, 6);
        let (pca, z) = PcaTransform::fit_transform(&x, 12).unwrap();
        let direct = pca.project(&x).unwrap();
        for (a, b) in z.values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-10);
        }
        let (_, tall) = PcaTransform::fit_transform(&random(40, 6, 7), 3).unwrap();
        assert_eq!((tall.n(), tall.p()), (40, 3));
    }

    #[test]
    fn full_rank_reconstructs() {
        let x = random(8, 20, 4);
        let pca = PcaTransform::fit(&x, 7).unwrap();
        let z = pca.project(&x).unwrap();
        for i in 0..x.n() {
            for col in 0..x.p() {
                let rec: f64 = (0..7).map(|j| z.get(i, j) * pca.component(j)[col]).sum();
                assert!((rec - (x.get(i, col) - pca.means()[col])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn section_round_trip_is_bit_exact() {
        let x = random(10, 15, 5);
        let pca = PcaTransform::fit(&x, 4).unwrap();
        let mut f = SectionFile::new();
        pca.write_sections(&mut f, "pca_");
        let back = SectionFile::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(
            PcaTransform::<f64>::read_sections(&back, "pca_").unwrap(),
            pca
        );
    }

    #[test]
    fn works_in_single_precision() {
        let x = FeatureMatrix::new(
            4,
            6,
            (0..24).map(|i| ((i * 37) % 11) as f32 / 7.0).collect(),
        )
        .unwrap();
        let pca = PcaTransform::fit(&x, 2).unwrap();
        let d: f32 = dot(pca.component(0), pca.component(1));
        assert!(d.abs() < 1e-5);
    }
}
