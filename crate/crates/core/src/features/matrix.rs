use std::fmt;
use std::path::Path;

use crate::container::RawMatrix;
use crate::scalar::Scalar;

use super::FeatureError;

/// Row-per-image real matrix, row-major. All values are finite.
#[derive(Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T> fmt::Debug for FeatureMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FeatureMatrix({}x{})", self.rows, self.cols)
    }
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, FeatureError> {
        if rows == 0 || cols == 0 {
            return Err(FeatureError::Empty { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(FeatureError::DimensionMismatch {
                expected: rows * cols,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFiniteInput {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self, FeatureError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(FeatureError::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    /// Number of rows (images).
    pub fn n(&self) -> usize {
        self.rows
    }

    /// Number of columns (features).
    pub fn p(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.values.chunks_exact(self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Self, FeatureError> {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.cols, values)
    }

    pub fn to_raw(&self) -> RawMatrix {
        RawMatrix::new(
            self.rows,
            self.cols,
            self.values.iter().map(|v| v.to_f64_lossless()).collect(),
        )
    }

    pub fn from_raw(raw: &RawMatrix) -> Result<Self, FeatureError> {
        Self::new(
            raw.rows,
            raw.cols,
            raw.values.iter().map(|&v| T::lit(v)).collect(),
        )
    }

    pub fn write_fmx(&self, path: &Path) -> Result<(), FeatureError> {
        Ok(self.to_raw().write_file(path)?)
    }
}

/// Reads a matrix produced by outside tooling (for example CNN embeddings)
/// from an FMX1 file.
pub fn load_external_features<T: Scalar>(path: &Path) -> Result<FeatureMatrix<T>, FeatureError> {
    let raw = RawMatrix::read_file(path)?;
    FeatureMatrix::from_raw(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::FormatError;

    #[test]
    fn header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.fmx");
        let mut bytes = b"FMX1".to_vec();
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&3u64.to_le_bytes());
        for v in [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&p, &bytes).unwrap();
        let m: FeatureMatrix<f64> = load_external_features(&p).unwrap();
        assert_eq!((m.n(), m.p()), (2, 3));
        assert_eq!(m.row(1), &[4.0, 5.0, 6.0]);

        std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_external_features::<f64>(&p).unwrap_err();
        assert!(matches!(
            err,
            FeatureError::Format(FormatError::Truncated(_))
        ));
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(
            FeatureMatrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(FeatureError::NonFiniteInput { row: 0, col: 1 })
        ));
        assert!(FeatureMatrix::<f64>::new(0, 2, vec![]).is_err());
        assert!(FeatureMatrix::from_rows(&[vec![1.0f32], vec![1.0, 2.0]]).is_err());
    }
}
