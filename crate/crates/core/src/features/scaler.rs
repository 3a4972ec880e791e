use rayon::prelude::*;

use crate::container::{FormatError, RawMatrix, SectionFile};
use crate::scalar::Scalar;

use super::{FeatureError, FeatureMatrix};

/// Standard deviations below this are treated as constant columns.
pub const MIN_SCALE: f64 = 1e-12;

/// Column-wise z-score transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler<T> {
    means: Vec<T>,
    scales: Vec<T>,
}

const COLUMN_CHUNK: usize = 4096;

impl<T: Scalar> Scaler<T> {
    pub fn new(means: Vec<T>, scales: Vec<T>) -> Result<Self, FeatureError> {
        if means.len() != scales.len() {
            return Err(FeatureError::DimensionMismatch {
                expected: means.len(),
                found: scales.len(),
            });
        }
        if scales.iter().any(|s| !s.is_finite() || *s <= T::zero())
            || means.iter().any(|m| !m.is_finite())
        {
            return Err(FeatureError::InvalidScaler);
        }
        Ok(Self { means, scales })
    }

    /// Column means and sample standard deviations. Columns whose deviation is
    /// below [`MIN_SCALE`] (and every column when `n == 1`) get scale 1.
    pub fn fit(x: &FeatureMatrix<T>) -> Result<Self, FeatureError> {
        if let Some(i) = x.values().iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFiniteInput {
                row: i / x.p(),
                col: i % x.p(),
            });
        }
        let n = x.n();
        let p = x.p();
        let mut means = vec![T::zero(); p];
        let mut scales = vec![T::one(); p];
        means
            .par_chunks_mut(COLUMN_CHUNK)
            .zip(scales.par_chunks_mut(COLUMN_CHUNK))
            .enumerate()
            .for_each(|(chunk, (mean, scale))| {
                let lo = chunk * COLUMN_CHUNK;
                let hi = lo + mean.len();
                for row in x.rows() {
                    for (m, v) in mean.iter_mut().zip(&row[lo..hi]) {
                        *m += *v;
                    }
                }
                let nf = T::lit(n as f64);
                mean.iter_mut().for_each(|m| *m /= nf);
                if n < 2 {
                    return;
                }
                let mut ss = vec![T::zero(); mean.len()];
                for row in x.rows() {
                    for ((s, v), m) in ss.iter_mut().zip(&row[lo..hi]).zip(mean.iter()) {
                        let d = *v - *m;
                        *s += d * d;
                    }
                }
                let denom = T::lit((n - 1) as f64);
                for (sc, s) in scale.iter_mut().zip(ss) {
                    let sd = (s / denom).sqrt();
                    *sc = if sd < T::lit(MIN_SCALE) { T::one() } else { sd };
                }
            });
        Ok(Self { means, scales })
    }

    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn width(&self) -> usize {
        self.means.len()
    }

    pub fn apply(&self, x: &FeatureMatrix<T>) -> Result<FeatureMatrix<T>, FeatureError> {
        let mut out = x.clone();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    pub fn apply_in_place(&self, x: &mut FeatureMatrix<T>) -> Result<(), FeatureError> {
        if x.p() != self.width() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.width(),
                found: x.p(),
            });
        }
        let p = x.p();
        x.values_mut()
            .par_chunks_mut(p)
            .for_each(|row| self.transform_row(row));
        Ok(())
    }

    pub fn apply_row(&self, row: &mut [T]) -> Result<(), FeatureError> {
        if row.len() != self.width() {
            return Err(FeatureError::DimensionMismatch {
                expected: self.width(),
                found: row.len(),
            });
        }
        self.transform_row(row);
        Ok(())
    }

    fn transform_row(&self, row: &mut [T]) {
        for ((v, m), s) in row.iter_mut().zip(&self.means).zip(&self.scales) {
            *v = (*v - *m) / *s;
        }
    }

    pub fn write_sections(&self, file: &mut SectionFile, prefix: &str) {
        let to_f64 = |v: &[T]| v.iter().map(|x| x.to_f64_lossless()).collect::<Vec<_>>();
        file.push_matrix(
            format!("{prefix}means"),
            RawMatrix::new(1, self.width(), to_f64(&self.means)),
        );
        file.push_matrix(
            format!("{prefix}scales"),
            RawMatrix::new(1, self.width(), to_f64(&self.scales)),
        );
    }

    pub fn read_sections(file: &SectionFile, prefix: &str) -> Result<Self, FeatureError> {
        let means = file.matrix(&format!("{prefix}means"))?;
        let scales = file.matrix(&format!("{prefix}scales"))?;
        let conv = |m: &RawMatrix| m.values.iter().map(|&v| T::lit(v)).collect::<Vec<_>>();
        Self::new(conv(means), conv(scales)).map_err(|_| {
            FeatureError::Format(FormatError::BadSection {
                name: format!("{prefix}scales"),
                detail: "invalid scaler parameters".into(),
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simple_column() {
        let x = FeatureMatrix::new(3, 1, vec![1.0f64, 2.0, 3.0]).unwrap();
        let s = Scaler::fit(&x).unwrap();
        assert_eq!(s.means(), &[2.0]);
        assert!((s.scales()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_column_gets_unit_scale() {
        let x = FeatureMatrix::new(3, 2, vec![5.0, 1.0, 5.0, 2.0, 5.0, 4.0]).unwrap();
        let s = Scaler::fit(&x).unwrap();
        assert_eq!(s.means()[0], 5.0);
        assert_eq!(s.scales()[0], 1.0);
    }

    #[test]
    fn single_row_scales_are_one() {
        let x = FeatureMatrix::new(1, 3, vec![1.0f32, -2.0, 3.0]).unwrap();
        let s = Scaler::fit(&x).unwrap();
        assert_eq!(s.scales(), &[1.0, 1.0, 1.0]);
        assert_eq!(s.means(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn apply_rules() {
        let x = FeatureMatrix::new(1, 2, vec![3.0, -4.0]).unwrap();
        let id = Scaler::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(id.apply(&x).unwrap(), x);
        let s = Scaler::new(vec![2.0], vec![4.0]).unwrap();
        let out = s
            .apply(&FeatureMatrix::new(1, 1, vec![2.0]).unwrap())
            .unwrap();
        assert_eq!(out.values(), &[0.0]);
        assert!(matches!(
            s.apply(&x),
            Err(FeatureError::DimensionMismatch { .. })
        ));
        assert!(Scaler::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn refit_after_apply_is_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..40).map(|_| rng.gen_range(-5.0..20.0)).collect();
        let x = FeatureMatrix::new(10, 4, vals).unwrap();
        let z = Scaler::fit(&x).unwrap().apply(&x).unwrap();
        let again = Scaler::fit(&z).unwrap();
        for j in 0..4 {
            assert!(again.means()[j].abs() < 1e-9);
            assert!((again.scales()[j] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wide_matrix_crosses_chunks() {
        let p = COLUMN_CHUNK + 17;
        let vals: Vec<f64> = (0..2 * p)
            .map(|i| (i % p) as f64 * if i < p { 1.0 } else { 3.0 })
            .collect();
        let x = FeatureMatrix::new(2, p, vals).unwrap();
        let s = Scaler::fit(&x).unwrap();
        let j = p - 1;
        assert_eq!(s.means()[j], 2.0 * j as f64);
        assert!((s.scales()[j] - (2.0f64).sqrt() * j as f64).abs() < 1e-9);
    }
}
