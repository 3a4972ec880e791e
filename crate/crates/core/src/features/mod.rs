//! Feature matrices, z-score scaling and PCA for wide (`p >> n`) data.

mod eigen;
mod matrix;
mod pca;
mod scaler;

use thiserror::Error;

use crate::container::FormatError;

pub use eigen::{symmetric_eigen, SymmetricEigen};
pub use matrix::{load_external_features, FeatureMatrix};
pub use pca::{PcaRoute, PcaTransform};
pub use scaler::{Scaler, MIN_SCALE};

/// Component count retained by default.
pub const DEFAULT_COMPONENTS: usize = 512;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteInput { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("feature matrix must be non-empty, got {rows}x{cols}")]
    Empty { rows: usize, cols: usize },
    #[error("component count {k} outside 1..={max}")]
    InvalidComponentCount { k: usize, max: usize },
    #[error("requested {requested} components but numerical rank is {rank}")]
    RankDeficient { requested: usize, rank: usize },
    #[error("scaler scales must be positive and finite")]
    InvalidScaler,
    #[error(transparent)]
    Format(#[from] FormatError),
}
