//! ν-one-class SVM with an RBF kernel, trained by SMO.
//!
//! The dual solved here is
//!
//! ```text
//! minimise  ½ αᵀ Q α
//! s.t.      0 ≤ αᵢ ≤ 1 / (ν n),   Σ αᵢ = 1,   Q_ij = exp(−γ ‖xᵢ − xⱼ‖²)
//! ```
//!
//! and the decision function is `f(x) = Σ αᵢ K(xᵢ, x) − ρ`. Working pairs are
//! the maximal KKT violators; the solver stops when the violation gap drops
//! below `tol` or after `max_iter` pair updates.

use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::container::{FormatError, SectionFile};
use crate::features::{FeatureError, FeatureMatrix};
use crate::scalar::{squared_distance, Scalar};
use crate::Label;

#[derive(Debug, Error)]
pub enum OcsvmError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("dimension mismatch: model expects {expected} features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcsvmParams {
    pub gamma: f64,
    pub nu: f64,
    pub tol: f64,
    pub max_iter: u64,
    /// Kernel row cache budget in bytes.
    pub cache_bytes: usize,
}

impl Default for OcsvmParams {
    fn default() -> Self {
        Self {
            gamma: 0.001,
            nu: 0.01,
            tol: 1e-3,
            max_iter: 10_000_000,
            cache_bytes: 1 << 30,
        }
    }
}

impl OcsvmParams {
    pub fn new(gamma: f64, nu: f64) -> Self {
        Self {
            gamma,
            nu,
            ..Self::default()
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    fn validate(&self) -> Result<(), OcsvmError> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(OcsvmError::InvalidHyperparameter(format!(
                "nu must be in (0, 1], got {}",
                self.nu
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(OcsvmError::InvalidHyperparameter(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(OcsvmError::InvalidHyperparameter(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(OcsvmError::InvalidHyperparameter(
                "max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcsvmModel<T> {
    support_vectors: FeatureMatrix<T>,
    alphas: Vec<T>,
    rho: T,
    gamma: T,
    nu: T,
    n_train: usize,
    converged: bool,
    iterations: u64,
    objective: T,
}

#[inline]
fn rbf<T: Scalar>(gamma: T, a: &[T], b: &[T]) -> T {
    (-gamma * squared_distance(a, b)).exp()
}

/// LRU cache of kernel rows `Q[i, ·]`.
struct KernelCache<'a, T> {
    x: &'a FeatureMatrix<T>,
    gamma: T,
    capacity: usize,
    rows: HashMap<usize, (Vec<T>, u64)>,
    clock: u64,
}

impl<'a, T: Scalar> KernelCache<'a, T> {
    fn new(x: &'a FeatureMatrix<T>, gamma: T, cache_bytes: usize) -> Self {
        let row_bytes = x.n() * std::mem::size_of::<T>();
        let capacity = (cache_bytes / row_bytes.max(1)).max(2);
        Self {
            x,
            gamma,
            capacity,
            rows: HashMap::new(),
            clock: 0,
        }
    }

    fn compute(&self, i: usize) -> Vec<T> {
        let xi = self.x.row(i);
        let n = self.x.n();
        if self.x.p() * n >= 1 << 16 {
            (0..n)
                .into_par_iter()
                .map(|j| rbf(self.gamma, xi, self.x.row(j)))
                .collect()
        } else {
            (0..n).map(|j| rbf(self.gamma, xi, self.x.row(j))).collect()
        }
    }

    fn row(&mut self, i: usize) -> &[T] {
        self.clock += 1;
        let clock = self.clock;
        if !self.rows.contains_key(&i) {
            if self.rows.len() >= self.capacity {
                let victim = self
                    .rows
                    .iter()
                    .min_by_key(|(_, (_, t))| *t)
                    .map(|(&k, _)| k)
                    .unwrap();
                self.rows.remove(&victim);
            }
            let r = self.compute(i);
            self.rows.insert(i, (r, clock));
        }
        let entry = self.rows.get_mut(&i).unwrap();
        entry.1 = clock;
        &entry.0
    }
}

impl<T: Scalar> OcsvmModel<T> {
    pub fn fit(x: &FeatureMatrix<T>, params: &OcsvmParams) -> Result<Self, OcsvmError> {
        params.validate()?;
        let n = x.n();
        let gamma = T::lit(params.gamma);
        let nu = T::lit(params.nu);
        let c = T::one() / (nu * T::lit(n as f64));
        let tol = T::lit(params.tol);

        // Feasible start: fill the first ⌊νn⌋ coordinates to the bound and put
        // the remainder on the next one.
        let mut alpha = vec![T::zero(); n];
        let full = ((params.nu * n as f64).floor() as usize).min(n);
        let mut remaining = T::one();
        for a in alpha.iter_mut().take(full) {
            let v = c.min(remaining);
            *a = v;
            remaining -= v;
        }
        if full < n && remaining > T::zero() {
            alpha[full] = remaining;
        }

        let mut cache = KernelCache::new(x, gamma, params.cache_bytes);
        let mut grad = vec![T::zero(); n];
        for j in 0..n {
            if alpha[j] > T::zero() {
                let aj = alpha[j];
                let qj = cache.row(j);
                for (g, q) in grad.iter_mut().zip(qj) {
                    *g += aj * *q;
                }
            }
        }

        let tau = T::lit(1e-12);
        let mut iterations = 0u64;
        let mut converged = false;
        while iterations < params.max_iter {
            // i: may grow (α < C) with the smallest gradient;
            // j: may shrink (α > 0) with the largest gradient.
            let mut i = usize::MAX;
            let mut gmin = T::infinity();
            let mut j = usize::MAX;
            let mut gmax = T::neg_infinity();
            for t in 0..n {
                if alpha[t] < c && grad[t] < gmin {
                    gmin = grad[t];
                    i = t;
                }
                if alpha[t] > T::zero() && grad[t] > gmax {
                    gmax = grad[t];
                    j = t;
                }
            }
            if i == usize::MAX || j == usize::MAX || gmax - gmin < tol {
                converged = true;
                break;
            }
            iterations += 1;

            let qi = cache.row(i).to_vec();
            let qj = cache.row(j);
            let mut quad = qi[i] + qj[j] - T::lit(2.0) * qi[j];
            if quad <= T::zero() {
                quad = tau;
            }
            let (old_i, old_j) = (alpha[i], alpha[j]);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = old_i + old_j;
            let mut ai = old_i - delta;
            let mut aj = old_j + delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < T::zero() {
                aj = T::zero();
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < T::zero() {
                ai = T::zero();
                aj = sum;
            }
            alpha[i] = ai;
            alpha[j] = aj;
            let (di, dj) = (ai - old_i, aj - old_j);
            for ((g, a), b) in grad.iter_mut().zip(&qi).zip(qj) {
                *g += *a * di + *b * dj;
            }
        }
        if !converged {
            log::warn!(
                "one-class SVM hit the iteration cap ({}) before meeting tol {}",
                params.max_iter,
                params.tol
            );
        }

        let rho = compute_rho(&alpha, &grad, c);
        let objective = alpha
            .iter()
            .zip(&grad)
            .fold(T::zero(), |acc, (a, g)| acc + *a * *g)
            * T::lit(0.5);

        let sv: Vec<usize> = (0..n).filter(|&t| alpha[t] > T::zero()).collect();
        Ok(Self {
            support_vectors: x.select_rows(&sv)?,
            alphas: sv.iter().map(|&t| alpha[t]).collect(),
            rho,
            gamma,
            nu,
            n_train: n,
            converged,
            iterations,
            objective,
        })
    }

    pub fn support_vectors(&self) -> &FeatureMatrix<T> {
        &self.support_vectors
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn rho(&self) -> T {
        self.rho
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn nu(&self) -> T {
        self.nu
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    /// False when the iteration cap stopped the solver; the model then holds
    /// the last (feasible) iterate.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    /// Dual objective `½ αᵀ Q α` at the returned iterate.
    pub fn dual_objective(&self) -> T {
        self.objective
    }

    pub fn input_width(&self) -> usize {
        self.support_vectors.p()
    }

    pub fn decision_function(&self, x: &[T]) -> Result<T, OcsvmError> {
        if x.len() != self.input_width() {
            return Err(OcsvmError::DimensionMismatch {
                expected: self.input_width(),
                found: x.len(),
            });
        }
        let s = self
            .support_vectors
            .rows()
            .zip(&self.alphas)
            .fold(T::zero(), |acc, (sv, a)| acc + *a * rbf(self.gamma, sv, x));
        Ok(s - self.rho)
    }

    pub fn decision_batch(&self, x: &FeatureMatrix<T>) -> Result<Vec<T>, OcsvmError> {
        let rows: Vec<&[T]> = x.rows().collect();
        rows.par_iter().map(|r| self.decision_function(r)).collect()
    }

    pub fn predict(&self, x: &[T]) -> Result<Label, OcsvmError> {
        Ok(label_from_decision(self.decision_function(x)?))
    }

    pub fn write_sections(&self, file: &mut SectionFile) {
        file.push_matrix("ocsvm_support_vectors", self.support_vectors.to_raw());
        file.push_scalars(
            "ocsvm_alphas",
            &self
                .alphas
                .iter()
                .map(|a| a.to_f64_lossless())
                .collect::<Vec<_>>(),
        );
        file.push_scalars(
            "ocsvm_scalars",
            &[
                self.rho.to_f64_lossless(),
                self.gamma.to_f64_lossless(),
                self.nu.to_f64_lossless(),
                self.n_train as f64,
                if self.converged { 1.0 } else { 0.0 },
                self.iterations as f64,
                self.objective.to_f64_lossless(),
            ],
        );
    }

    pub fn read_sections(file: &SectionFile) -> Result<Self, OcsvmError> {
        let support_vectors = FeatureMatrix::from_raw(file.matrix("ocsvm_support_vectors")?)?;
        let alphas = file.matrix("ocsvm_alphas")?;
        if alphas.values.len() != support_vectors.n() {
            return Err(FormatError::BadSection {
                name: "ocsvm_alphas".into(),
                detail: "alpha count differs from support vector count".into(),
            }
            .into());
        }
        let s = file.scalars("ocsvm_scalars", 7)?;
        Ok(Self {
            support_vectors,
            alphas: alphas.values.iter().map(|&v| T::lit(v)).collect(),
            rho: T::lit(s[0]),
            gamma: T::lit(s[1]),
            nu: T::lit(s[2]),
            n_train: s[3] as usize,
            converged: s[4] != 0.0,
            iterations: s[5] as u64,
            objective: T::lit(s[6]),
        })
    }
}

/// `+1` when `f ≥ 0` (the boundary counts as valid), else `-1`.
pub fn label_from_decision<T: Scalar>(f: T) -> Label {
    if f >= T::zero() {
        Label::Valid
    } else {
        Label::Anomalous
    }
}

/// Offset making `f = 0` on free support vectors; falls back to the midpoint
/// of the feasible interval when every αᵢ sits on a bound.
fn compute_rho<T: Scalar>(alpha: &[T], grad: &[T], c: T) -> T {
    let mut ub = T::infinity();
    let mut lb = T::neg_infinity();
    let mut free_sum = T::zero();
    let mut free = 0usize;
    for (&a, &g) in alpha.iter().zip(grad) {
        if a >= c {
            lb = lb.max(g);
        } else if a <= T::zero() {
            ub = ub.min(g);
        } else {
            free += 1;
            free_sum += g;
        }
    }
    if free > 0 {
        free_sum / T::lit(free as f64)
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) * T::lit(0.5)
    } else if lb.is_finite() {
        lb
    } else {
        ub
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(gamma: f64, nu: f64) -> OcsvmParams {
        OcsvmParams::new(gamma, nu).with_tol(1e-10)
    }

    #[test]
    fn single_point() {
        for nu in [0.1, 0.5, 1.0] {
            let x = FeatureMatrix::new(1, 2, vec![0.3f64, -1.2]).unwrap();
            let m = OcsvmModel::fit(&x, &params(1.0, nu)).unwrap();
            assert_eq!(m.alphas(), &[1.0]);
            assert!((m.rho() - 1.0).abs() < 1e-15);
            assert!(m.decision_function(&[0.3, -1.2]).unwrap().abs() < 1e-15);
            assert_eq!(m.predict(&[0.3, -1.2]).unwrap(), Label::Valid);
        }
    }

    #[test]
    fn far_query_tends_to_minus_rho() {
        let x = FeatureMatrix::new(3, 1, vec![0.0f64, 0.5, 1.0]).unwrap();
        let m = OcsvmModel::fit(&x, &params(1.0, 0.5)).unwrap();
        let f = m.decision_function(&[1e6]).unwrap();
        assert!((f + m.rho()).abs() < 1e-12);
        assert_eq!(m.predict(&[1e6]).unwrap(), Label::Anomalous);
    }

    #[test]
    fn sign_rule() {
        assert_eq!(label_from_decision(0.2), Label::Valid);
        assert_eq!(label_from_decision(-0.2), Label::Anomalous);
        assert_eq!(label_from_decision(0.0), Label::Valid);
    }

    #[test]
    fn box_and_simplex_constraints() {
        let vals: Vec<f64> = (0..40)
            .map(|i| ((i * 17 % 23) as f64 / 7.0).sin())
            .collect();
        let x = FeatureMatrix::new(20, 2, vals).unwrap();
        let nu = 0.3;
        let m = OcsvmModel::fit(&x, &params(0.8, nu)).unwrap();
        let c = 1.0 / (nu * 20.0);
        let total: f64 = m.alphas().iter().sum();
        assert!((total - 1.0).abs() < 1e-8);
        assert!(m.alphas().iter().all(|&a| a > 0.0 && a <= c + 1e-15));
        assert!(m.converged());
    }

    #[test]
    fn batch_matches_single() {
        let x = FeatureMatrix::new(
            6,
            2,
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 2.0, 2.0],
        )
        .unwrap();
        let m = OcsvmModel::fit(&x, &params(0.5, 0.5)).unwrap();
        let batch = m.decision_batch(&x).unwrap();
        for (i, b) in batch.iter().enumerate() {
            assert_eq!(*b, m.decision_function(x.row(i)).unwrap());
        }
        assert!(matches!(
            m.decision_function(&[1.0]),
            Err(OcsvmError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_hyperparameters() {
        let x = FeatureMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        for (g, nu) in [(1.0, 0.0), (1.0, 1.5), (0.0, 0.5), (-1.0, 0.5)] {
            assert!(matches!(
                OcsvmModel::fit(&x, &params(g, nu)),
                Err(OcsvmError::InvalidHyperparameter(_))
            ));
        }
    }

    #[test]
    fn iteration_cap_flags_non_convergence() {
        let vals: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).cos()).collect();
        let x = FeatureMatrix::new(15, 2, vals).unwrap();
        let p = OcsvmParams {
            max_iter: 1,
            ..params(1.0, 0.5)
        };
        let m = OcsvmModel::fit(&x, &p).unwrap();
        assert!(!m.converged());
        assert_eq!(m.iterations(), 1);
        let total: f64 = m.alphas().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_cache_gives_same_model() {
        let vals: Vec<f64> = (0..60)
            .map(|i| ((i * 13 % 29) as f64 / 5.0).sin())
            .collect();
        let x = FeatureMatrix::new(30, 2, vals).unwrap();
        let big = OcsvmModel::fit(&x, &params(1.0, 0.2)).unwrap();
        let small = OcsvmModel::fit(
            &x,
            &OcsvmParams {
                cache_bytes: 1,
                ..params(1.0, 0.2)
            },
        )
        .unwrap();
        assert_eq!(big, small);
    }

    #[test]
    fn persistence_is_bit_exact() {
        let x = FeatureMatrix::new(4, 2, vec![0.1, 0.2, 0.3, 0.1, 0.9, 0.4, 0.5, 0.5]).unwrap();
        let m = OcsvmModel::fit(&x, &OcsvmParams::new(0.001, 0.01)).unwrap();
        let mut f = SectionFile::new();
        m.write_sections(&mut f);
        let back =
            OcsvmModel::<f64>::read_sections(&SectionFile::from_bytes(&f.to_bytes()).unwrap())
                .unwrap();
        assert_eq!(back, m);
        assert_eq!(back.gamma(), 0.001);
        assert_eq!(back.nu(), 0.01);
    }
}
