//! One-class anomaly detection for simulations that emit periodic state images.
//!
//! The crate covers the whole path from rendered frames to a verdict a running
//! simulation can act on:
//!
//! * [`imagery`]: PNG ingestion, crop/resize/flip/flatten, and a synthetic
//!   entropy-slice generator with optional injected rays.
//! * [`features`]: z-score scaling and PCA that stays tractable when each
//!   row has close to a million columns.
//! * [`ocsvm`] and [`iforest`]: the two one-class models.
//! * [`tuner`]: random hyperparameter search on misclassification rate.
//! * [`pipelines`]: offline train/evaluate, flip-transfer experiments and the
//!   retrain-per-frame online harness.
//! * [`sentinel`]: exit-code classification, a request/reply daemon, and a
//!   step/classify/rewind workflow driver.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision types used by the CLI and persisted bundles.

pub mod container;
pub mod features;
pub mod iforest;
pub mod imagery;
pub mod ocsvm;
pub mod pipelines;
pub mod scalar;
pub mod seed;
pub mod sentinel;
pub mod tuner;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use scalar::Scalar;

pub type FeatureMatrix64 = features::FeatureMatrix<f64>;
pub type FeatureMatrix32 = features::FeatureMatrix<f32>;
pub type Scaler64 = features::Scaler<f64>;
pub type PcaTransform64 = features::PcaTransform<f64>;
pub type OcsvmModel64 = ocsvm::OcsvmModel<f64>;
pub type OcsvmModel32 = ocsvm::OcsvmModel<f32>;
pub type IForestModel64 = iforest::IForestModel<f64>;
pub type IForestModel32 = iforest::IForestModel<f32>;
pub type Bundle = pipelines::OfflineBundle<f64>;

/// Class label: `+1` for a valid frame, `-1` for an anomalous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "i8", try_from = "i8")]
pub enum Label {
    Valid,
    Anomalous,
}

impl Label {
    pub fn as_i8(self) -> i8 {
        match self {
            Label::Valid => 1,
            Label::Anomalous => -1,
        }
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        l.as_i8()
    }
}

impl TryFrom<i8> for Label {
    type Error = String;

    fn try_from(v: i8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Label::Valid),
            -1 => Ok(Label::Anomalous),
            other => Err(format!("label must be 1 or -1, got {other}")),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_i8())
    }
}

/// Lowercase hex SHA-256.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
