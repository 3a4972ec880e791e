//! Offline train/evaluate, flip-transfer experiments and the online
//! retrain-per-frame harness.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{FormatError, SectionFile};
use crate::features::{FeatureError, FeatureMatrix, PcaTransform, Scaler, DEFAULT_COMPONENTS};
use crate::iforest::{IForestError, IForestModel, IForestParams, MaxSamples};
use crate::imagery::{flip, load_image, FlipAxis, ImageError, ImageTensor, Manifest, Preprocess};
use crate::ocsvm::{OcsvmError, OcsvmModel, OcsvmParams};
use crate::scalar::Scalar;
use crate::seed::mix_seed;
use crate::tuner::{search, search_parallel, Params, SearchResult, SearchSpace, TunerError};
use crate::{digest_hex, Label};

/// Bundle metadata layout version.
pub const BUNDLE_FORMAT: u32 = 1;
/// Training-set size below which verdicts are flagged as warm-up.
pub const DEFAULT_WARM_UP: usize = 300;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("insufficient data: {found} valid rows, need at least {required}")]
    InsufficientData { found: usize, required: usize },
    #[error("{stage}: {source}")]
    Image {
        stage: &'static str,
        #[source]
        source: ImageError,
    },
    #[error("{stage}: {source}")]
    Feature {
        stage: &'static str,
        #[source]
        source: FeatureError,
    },
    #[error("{stage}: {source}")]
    Ocsvm {
        stage: &'static str,
        #[source]
        source: OcsvmError,
    },
    #[error("{stage}: {source}")]
    IForest {
        stage: &'static str,
        #[source]
        source: IForestError,
    },
    #[error("bundle: {0}")]
    Format(#[from] FormatError),
    #[error("bundle metadata: {0}")]
    BadBundle(String),
    #[error("dimension mismatch: bundle expects {expected} features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("online step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<PipelineError>,
    },
}

fn image_err(stage: &'static str) -> impl Fn(ImageError) -> PipelineError {
    move |source| PipelineError::Image { stage, source }
}

fn feature_err(stage: &'static str) -> impl Fn(FeatureError) -> PipelineError {
    move |source| PipelineError::Feature { stage, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Flattened pixels after [`Preprocess`].
    RawPixel,
    /// Rows supplied by outside tooling; the bundle cannot featurize images.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ModelSpec {
    Iforest {
        trees: usize,
        max_samples: MaxSamples,
        contamination: f64,
    },
    Ocsvm {
        gamma: f64,
        nu: f64,
        tol: f64,
    },
}

impl ModelSpec {
    pub fn iforest(trees: usize) -> Self {
        ModelSpec::Iforest {
            trees,
            max_samples: MaxSamples::Fraction(1.0),
            contamination: 0.0,
        }
    }

    pub fn ocsvm(gamma: f64, nu: f64) -> Self {
        ModelSpec::Ocsvm {
            gamma,
            nu,
            tol: OcsvmParams::default().tol,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Iforest { .. } => "iforest",
            ModelSpec::Ocsvm { .. } => "ocsvm",
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::iforest(125)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    /// Retained PCA components; `None` trains on the scaled rows directly.
    pub pca: Option<usize>,
    pub preprocess: Preprocess,
    pub seed: u64,
    /// Bundles trained on fewer rows than this are marked warm-up.
    pub warm_up_threshold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            pca: Some(DEFAULT_COMPONENTS),
            preprocess: Preprocess::PRODUCTION,
            seed: 0,
            warm_up_threshold: DEFAULT_WARM_UP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel<T> {
    Iforest(IForestModel<T>),
    Ocsvm(OcsvmModel<T>),
}

impl<T: Scalar> TrainedModel<T> {
    pub fn fit(x: &FeatureMatrix<T>, spec: &ModelSpec, seed: u64) -> Result<Self, PipelineError> {
        match *spec {
            ModelSpec::Iforest {
                trees,
                max_samples,
                contamination,
            } => {
                let params = IForestParams {
                    trees,
                    max_samples,
                    contamination,
                    seed,
                };
                IForestModel::fit(x, &params)
                    .map(TrainedModel::Iforest)
                    .map_err(|source| PipelineError::IForest {
                        stage: "model training",
                        source,
                    })
            }
            ModelSpec::Ocsvm { gamma, nu, tol } => {
                let params = OcsvmParams::new(gamma, nu).with_tol(tol);
                let m = OcsvmModel::fit(x, &params).map_err(|source| PipelineError::Ocsvm {
                    stage: "model training",
                    source,
                })?;
                if !m.converged() {
                    log::warn!("one-class SVM stopped at the iteration cap before converging");
                }
                Ok(TrainedModel::Ocsvm(m))
            }
        }
    }

    pub fn n_train(&self) -> usize {
        match self {
            TrainedModel::Iforest(m) => m.n_train(),
            TrainedModel::Ocsvm(m) => m.n_train(),
        }
    }

    /// Label plus the model's raw score: the anomaly score for isolation
    /// forests, the decision value for the SVM.
    pub fn classify(&self, row: &[T]) -> Result<(Label, f64), PipelineError> {
        match self {
            TrainedModel::Iforest(m) => {
                let s = m
                    .anomaly_score(row)
                    .map_err(|source| PipelineError::IForest {
                        stage: "prediction",
                        source,
                    })?;
                Ok((crate::iforest::label_from_score(s, m.threshold()), s))
            }
            TrainedModel::Ocsvm(m) => {
                let f = m
                    .decision_function(row)
                    .map_err(|source| PipelineError::Ocsvm {
                        stage: "prediction",
                        source,
                    })?;
                Ok((crate::ocsvm::label_from_decision(f), f.to_f64_lossless()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub manifest_digest: String,
    pub n_train: usize,
    pub n_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    format: u32,
    model: ModelSpec,
    pca_components: Option<usize>,
    preprocess: Preprocess,
    source: FeatureSource,
    provenance: Provenance,
    warm_up: bool,
}

/// Scaler, optional PCA and a trained model, plus enough metadata to
/// featurize new frames the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineBundle<T> {
    pub scaler: Scaler<T>,
    pub pca: Option<PcaTransform<T>>,
    pub model: TrainedModel<T>,
    pub spec: ModelSpec,
    pub preprocess: Preprocess,
    pub source: FeatureSource,
    pub provenance: Provenance,
    pub warm_up: bool,
}

impl<T: Scalar> OfflineBundle<T> {
    fn meta(&self) -> BundleMeta {
        BundleMeta {
            format: BUNDLE_FORMAT,
            model: self.spec,
            pca_components: self.pca.as_ref().map(|p| p.k()),
            preprocess: self.preprocess,
            source: self.source,
            provenance: self.provenance.clone(),
            warm_up: self.warm_up,
        }
    }

    /// First 16 hex digits of the SHA-256 of the bundle metadata.
    pub fn model_id(&self) -> String {
        let json = serde_json::to_string(&self.meta()).expect("metadata serializes");
        digest_hex(json.as_bytes())[..16].to_string()
    }

    /// Width of the rows the bundle accepts before scaling.
    pub fn input_width(&self) -> usize {
        self.scaler.width()
    }

    pub fn featurize(&self, img: &ImageTensor) -> Result<Vec<T>, PipelineError> {
        if self.source == FeatureSource::External {
            return Err(PipelineError::InvalidConfig(
                "bundle was trained on external features".into(),
            ));
        }
        self.preprocess
            .features(img)
            .map_err(image_err("preprocessing"))
    }

    /// Scales and projects one raw feature row.
    pub fn transform_row(&self, mut row: Vec<T>) -> Result<Vec<T>, PipelineError> {
        if row.len() != self.input_width() {
            return Err(PipelineError::DimensionMismatch {
                expected: self.input_width(),
                found: row.len(),
            });
        }
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(feature_err("scaling")(FeatureError::NonFiniteInput {
                row: 0,
                col: i,
            }));
        }
        self.scaler
            .apply_row(&mut row)
            .map_err(feature_err("scaling"))?;
        match &self.pca {
            Some(p) => p.project_row(&row).map_err(feature_err("projection")),
            None => Ok(row),
        }
    }

    pub fn classify_row(&self, row: Vec<T>) -> Result<(Label, f64), PipelineError> {
        self.model.classify(&self.transform_row(row)?)
    }

    pub fn classify_image(&self, img: &ImageTensor) -> Result<(Label, f64), PipelineError> {
        self.classify_row(self.featurize(img)?)
    }

    pub fn classify_path(&self, path: &Path) -> Result<(Label, f64), PipelineError> {
        let img = load_image(path).map_err(image_err("loading image"))?;
        self.classify_image(&img)
    }

    pub fn to_sections(&self) -> SectionFile {
        let mut file = SectionFile::new();
        file.push_text(
            "bundle_meta",
            serde_json::to_string(&self.meta()).expect("metadata serializes"),
        );
        self.scaler.write_sections(&mut file, "scaler_");
        if let Some(p) = &self.pca {
            p.write_sections(&mut file, "pca_");
        }
        match &self.model {
            TrainedModel::Iforest(m) => m.write_sections(&mut file),
            TrainedModel::Ocsvm(m) => m.write_sections(&mut file),
        }
        file
    }

    pub fn from_sections(file: &SectionFile) -> Result<Self, PipelineError> {
        let meta: BundleMeta = serde_json::from_str(file.text("bundle_meta")?)
            .map_err(|e| PipelineError::BadBundle(e.to_string()))?;
        if meta.format != BUNDLE_FORMAT {
            return Err(PipelineError::BadBundle(format!(
                "unsupported bundle format {}",
                meta.format
            )));
        }
        let scaler =
            Scaler::read_sections(file, "scaler_").map_err(feature_err("reading scaler"))?;
        let pca = match meta.pca_components {
            Some(_) => Some(
                PcaTransform::read_sections(file, "pca_").map_err(feature_err("reading PCA"))?,
            ),
            None => None,
        };
        let model = match meta.model {
            ModelSpec::Iforest { .. } => {
                TrainedModel::Iforest(IForestModel::read_sections(file).map_err(|source| {
                    PipelineError::IForest {
                        stage: "reading model",
                        source,
                    }
                })?)
            }
            ModelSpec::Ocsvm { .. } => {
                TrainedModel::Ocsvm(OcsvmModel::read_sections(file).map_err(|source| {
                    PipelineError::Ocsvm {
                        stage: "reading model",
                        source,
                    }
                })?)
            }
        };
        let model_width = match (&pca, &model) {
            (Some(p), _) if p.input_width() != scaler.width() => {
                return Err(PipelineError::BadBundle(
                    "PCA width does not match scaler".into(),
                ))
            }
            (Some(p), _) => p.k(),
            (None, _) => scaler.width(),
        };
        let expected = match &model {
            TrainedModel::Iforest(m) => m.input_width(),
            TrainedModel::Ocsvm(m) => m.input_width(),
        };
        if expected != model_width {
            return Err(PipelineError::BadBundle(format!(
                "model expects {expected} features but the feature stages produce {model_width}"
            )));
        }
        Ok(Self {
            scaler,
            pca,
            model,
            spec: meta.model,
            preprocess: meta.preprocess,
            source: meta.source,
            provenance: meta.provenance,
            warm_up: meta.warm_up,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_sections().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        Self::from_sections(&SectionFile::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        Ok(self.to_sections().write_file(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_sections(&SectionFile::read_file(path)?)
    }
}

/// Fits scaler, optional PCA and model on the rows of `x` labelled valid.
pub fn train_on_features<T: Scalar>(
    x: &FeatureMatrix<T>,
    labels: &[Label],
    config: &TrainConfig,
    source: FeatureSource,
    manifest_digest: String,
) -> Result<OfflineBundle<T>, PipelineError> {
    if labels.len() != x.n() {
        return Err(PipelineError::DimensionMismatch {
            expected: x.n(),
            found: labels.len(),
        });
    }
    let valid: Vec<usize> = (0..x.n()).filter(|&i| labels[i] == Label::Valid).collect();
    if valid.len() < 2 {
        return Err(PipelineError::InsufficientData {
            found: valid.len(),
            required: 2,
        });
    }
    let train = if valid.len() == x.n() {
        x.clone()
    } else {
        x.select_rows(&valid).map_err(feature_err("selection"))?
    };
    log::info!(
        "training on {} valid rows of width {}",
        train.n(),
        train.p()
    );
    let scaler = Scaler::fit(&train).map_err(feature_err("scaling"))?;
    let mut z = train;
    scaler
        .apply_in_place(&mut z)
        .map_err(feature_err("scaling"))?;
    let (pca, z) = match config.pca {
        Some(k) => {
            let (p, projected) = PcaTransform::fit_transform(&z, k).map_err(feature_err("PCA"))?;
            (Some(p), projected)
        }
        None => (None, z),
    };
    let model = TrainedModel::fit(&z, &config.model, config.seed)?;
    Ok(OfflineBundle {
        provenance: Provenance {
            seed: config.seed,
            manifest_digest,
            n_train: model.n_train(),
            n_features: scaler.width(),
        },
        warm_up: model.n_train() < config.warm_up_threshold,
        scaler,
        pca,
        model,
        spec: config.model,
        preprocess: config.preprocess,
        source,
    })
}

/// Loads every manifest image (optionally flipped first) and featurizes it.
pub fn load_features<T: Scalar>(
    manifest: &Manifest,
    preprocess: &Preprocess,
    axis: FlipAxis,
) -> Vec<Result<Vec<T>, PipelineError>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let img = load_image(&manifest.resolve(e)).map_err(image_err("loading image"))?;
            let img = if axis == FlipAxis::Identity {
                img
            } else {
                flip(&img, axis)
            };
            preprocess
                .features(&img)
                .map_err(image_err("preprocessing"))
        })
        .collect()
}

/// Trains on the valid-labelled images of `manifest`.
pub fn train_offline<T: Scalar>(
    manifest: &Manifest,
    config: &TrainConfig,
) -> Result<OfflineBundle<T>, PipelineError> {
    let valid = manifest
        .entries
        .iter()
        .filter(|e| e.label == Label::Valid)
        .count();
    if valid < 2 {
        return Err(PipelineError::InsufficientData {
            found: valid,
            required: 2,
        });
    }
    let train = Manifest::new(
        manifest.root.clone(),
        manifest
            .entries
            .iter()
            .filter(|e| e.label == Label::Valid)
            .cloned()
            .collect(),
    );
    let rows = load_features::<T>(&train, &config.preprocess, FlipAxis::Identity)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let x = FeatureMatrix::from_rows(&rows).map_err(feature_err("assembling features"))?;
    drop(rows);
    let labels = vec![Label::Valid; x.n()];
    train_on_features(
        &x,
        &labels,
        config,
        FeatureSource::RawPixel,
        manifest.digest(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageVerdict {
    pub path: String,
    pub actual: Label,
    pub predicted: Option<Label>,
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Confusion counts plus per-image verdicts. Images that failed to load or
/// classify are counted in `failures` and never as correct.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub valid_passed: usize,
    pub valid_flagged: usize,
    pub anomalous_missed: usize,
    pub anomalous_flagged: usize,
    pub failures: usize,
    pub verdicts: Vec<ImageVerdict>,
}

impl EvalReport {
    pub fn from_verdicts(verdicts: Vec<ImageVerdict>) -> Self {
        let mut r = EvalReport::default();
        for v in &verdicts {
            match (v.actual, v.predicted) {
                (_, None) => r.failures += 1,
                (Label::Valid, Some(Label::Valid)) => r.valid_passed += 1,
                (Label::Valid, Some(Label::Anomalous)) => r.valid_flagged += 1,
                (Label::Anomalous, Some(Label::Valid)) => r.anomalous_missed += 1,
                (Label::Anomalous, Some(Label::Anomalous)) => r.anomalous_flagged += 1,
            }
        }
        r.verdicts = verdicts;
        r
    }

    pub fn total(&self) -> usize {
        self.valid_passed
            + self.valid_flagged
            + self.anomalous_missed
            + self.anomalous_flagged
            + self.failures
    }

    pub fn correct_valid(&self) -> usize {
        self.valid_passed
    }

    pub fn correct_anomalous(&self) -> usize {
        self.anomalous_flagged
    }

    pub fn valid_accuracy(&self) -> Option<f64> {
        let n = self.valid_passed + self.valid_flagged;
        (n > 0).then(|| self.valid_passed as f64 / n as f64)
    }

    pub fn anomalous_accuracy(&self) -> Option<f64> {
        let n = self.anomalous_missed + self.anomalous_flagged;
        (n > 0).then(|| self.anomalous_flagged as f64 / n as f64)
    }

    /// `(correct valid + correct anomalous) / total`; `None` for an empty report.
    pub fn weighted_accuracy(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| (self.correct_valid() + self.correct_anomalous()) as f64 / n as f64)
    }

    /// Confusion table with actual class in rows and predicted class in columns.
    pub fn confusion_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>18} {:>10} {:>10}", "", "pred valid", "pred anom");
        let _ = writeln!(
            s,
            "{:>18} {:>10} {:>10}",
            "actual valid", self.valid_passed, self.valid_flagged
        );
        let _ = writeln!(
            s,
            "{:>18} {:>10} {:>10}",
            "actual anomalous", self.anomalous_missed, self.anomalous_flagged
        );
        if self.failures > 0 {
            let _ = writeln!(s, "failed images: {}", self.failures);
        }
        let _ = writeln!(
            s,
            "weighted accuracy: {}",
            fmt_accuracy(self.weighted_accuracy())
        );
        s
    }

    /// One line per image, JSON.
    pub fn verdicts_jsonl(&self) -> String {
        self.verdicts
            .iter()
            .map(|v| serde_json::to_string(v).expect("verdict serializes") + "\n")
            .collect()
    }
}

fn fmt_accuracy(a: Option<f64>) -> String {
    match a {
        Some(v) => format!("{:.1}%", 100.0 * v),
        None => "undefined (no images)".into(),
    }
}

fn evaluate_with<T: Scalar>(
    bundle: &OfflineBundle<T>,
    manifest: &Manifest,
    axis: FlipAxis,
) -> EvalReport {
    let verdicts = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            let outcome = load_image(&path)
                .map_err(image_err("loading image"))
                .map(|img| {
                    if axis == FlipAxis::Identity {
                        img
                    } else {
                        flip(&img, axis)
                    }
                })
                .and_then(|img| bundle.classify_image(&img));
            let (predicted, score, error) = match outcome {
                Ok((l, s)) => (Some(l), Some(s), None),
                Err(err) => (None, None, Some(err.to_string())),
            };
            ImageVerdict {
                path: e.path.display().to_string(),
                actual: e.label,
                predicted,
                score,
                error,
            }
        })
        .collect();
    EvalReport::from_verdicts(verdicts)
}

pub fn evaluate<T: Scalar>(bundle: &OfflineBundle<T>, manifest: &Manifest) -> EvalReport {
    evaluate_with(bundle, manifest, FlipAxis::Identity)
}

/// Evaluates pre-extracted feature rows.
pub fn evaluate_features<T: Scalar>(
    bundle: &OfflineBundle<T>,
    x: &FeatureMatrix<T>,
    labels: &[Label],
) -> EvalReport {
    let verdicts = (0..x.n())
        .into_par_iter()
        .map(|i| {
            let (predicted, score, error) = match bundle.classify_row(x.row(i).to_vec()) {
                Ok((l, s)) => (Some(l), Some(s), None),
                Err(err) => (None, None, Some(err.to_string())),
            };
            ImageVerdict {
                path: format!("row {i}"),
                actual: labels[i],
                predicted,
                score,
                error,
            }
        })
        .collect();
    EvalReport::from_verdicts(verdicts)
}

/// One report per axis, each image flipped before featurization.
pub fn flip_experiment<T: Scalar>(
    bundle: &OfflineBundle<T>,
    manifest: &Manifest,
    axes: &[FlipAxis],
) -> Vec<(FlipAxis, EvalReport)> {
    axes.iter()
        .map(|&a| (a, evaluate_with(bundle, manifest, a)))
        .collect()
}

/// Per-axis counts: correct valid, correct anomalous, weighted accuracy.
pub fn flip_table(reports: &[(FlipAxis, EvalReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>8} {:>10} {:>9}",
        "flip", "normal", "anomalous", "overall"
    );
    for (axis, r) in reports {
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>10} {:>9}",
            axis.name(),
            format!("{}/{}", r.correct_valid(), r.valid_passed + r.valid_flagged),
            format!(
                "{}/{}",
                r.correct_anomalous(),
                r.anomalous_missed + r.anomalous_flagged
            ),
            fmt_accuracy(r.weighted_accuracy())
        );
    }
    s
}

/// Indices of `n_valid` valid and `n_anomalous` anomalous entries drawn
/// without replacement, each group in manifest order.
pub fn sample_eval_indices(
    labels: &[Label],
    n_valid: usize,
    n_anomalous: usize,
    seed: u64,
) -> Result<Vec<usize>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |label: Label, count: usize| -> Result<Vec<usize>, PipelineError> {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if count > idx.len() {
            return Err(PipelineError::InvalidConfig(format!(
                "requested {count} {} images but the manifest has {}",
                if label == Label::Valid {
                    "valid"
                } else {
                    "anomalous"
                },
                idx.len()
            )));
        }
        let mut chosen: Vec<usize> = sample(&mut rng, idx.len(), count)
            .into_iter()
            .map(|k| idx[k])
            .collect();
        chosen.sort_unstable();
        Ok(chosen)
    };
    let mut indices = pick(Label::Valid, n_valid)?;
    indices.extend(pick(Label::Anomalous, n_anomalous)?);
    Ok(indices)
}

/// The evaluation pool as a manifest; see [`sample_eval_indices`].
pub fn sample_eval_pool(
    manifest: &Manifest,
    n_valid: usize,
    n_anomalous: usize,
    seed: u64,
) -> Result<Manifest, PipelineError> {
    let labels: Vec<Label> = manifest.entries.iter().map(|e| e.label).collect();
    Ok(manifest.subset(&sample_eval_indices(&labels, n_valid, n_anomalous, seed)?))
}

// ---------------------------------------------------------------------------
// Tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Iforest,
    Ocsvm,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iforest" => Ok(ModelKind::Iforest),
            "ocsvm" => Ok(ModelKind::Ocsvm),
            other => Err(format!(
                "unknown model `{other}` (expected iforest or ocsvm)"
            )),
        }
    }
}

impl ModelKind {
    pub fn default_space(self) -> SearchSpace {
        match self {
            ModelKind::Iforest => SearchSpace::iforest_default(),
            ModelKind::Ocsvm => SearchSpace::ocsvm_default(),
        }
    }

    /// Builds a spec from sampled parameters, falling back to the defaults
    /// for anything the space leaves out.
    pub fn spec(self, p: &Params) -> Result<ModelSpec, String> {
        let get = |k: &str, d: f64| p.get(k).copied().unwrap_or(d);
        match self {
            ModelKind::Iforest => {
                let trees = get("trees", 125.0);
                if trees.is_nan() || trees < 1.0 {
                    return Err(format!("invalid tree count {trees}"));
                }
                let ModelSpec::Iforest { max_samples, .. } = ModelSpec::iforest(1) else {
                    unreachable!()
                };
                Ok(ModelSpec::Iforest {
                    trees: trees.round() as usize,
                    max_samples,
                    contamination: get("contamination", 0.0),
                })
            }
            ModelKind::Ocsvm => Ok(ModelSpec::ocsvm(get("gamma", 1e-3), get("nu", 0.01))),
        }
    }
}

/// Scaled (and optionally projected) training rows plus an evaluation pool.
#[derive(Debug, Clone)]
pub struct TuningData<T> {
    pub train: FeatureMatrix<T>,
    pub eval: FeatureMatrix<T>,
    pub eval_labels: Vec<Label>,
}

impl<T: Scalar> TuningData<T> {
    /// Fits scaling and PCA once on the valid rows of `x`; the pool is
    /// transformed with them. Pool valid rows stay in the training set.
    pub fn prepare(
        x: &FeatureMatrix<T>,
        labels: &[Label],
        pca: Option<usize>,
        pool: &[usize],
    ) -> Result<Self, PipelineError> {
        if labels.len() != x.n() {
            return Err(PipelineError::DimensionMismatch {
                expected: x.n(),
                found: labels.len(),
            });
        }
        let valid: Vec<usize> = (0..x.n()).filter(|&i| labels[i] == Label::Valid).collect();
        if valid.len() < 2 {
            return Err(PipelineError::InsufficientData {
                found: valid.len(),
                required: 2,
            });
        }
        let train = x.select_rows(&valid).map_err(feature_err("selection"))?;
        let scaler = Scaler::fit(&train).map_err(feature_err("scaling"))?;
        let mut z = train;
        scaler
            .apply_in_place(&mut z)
            .map_err(feature_err("scaling"))?;
        let mut eval = x.select_rows(pool).map_err(feature_err("selection"))?;
        scaler
            .apply_in_place(&mut eval)
            .map_err(feature_err("scaling"))?;
        let (train, eval) = match pca {
            Some(k) => {
                let (p, projected) =
                    PcaTransform::fit_transform(&z, k).map_err(feature_err("PCA"))?;
                (
                    projected,
                    p.project(&eval).map_err(feature_err("projection"))?,
                )
            }
            None => (z, eval),
        };
        Ok(Self {
            train,
            eval,
            eval_labels: pool.iter().map(|&i| labels[i]).collect(),
        })
    }

    /// Fraction of the pool the model gets wrong.
    pub fn misclassification(&self, spec: &ModelSpec, seed: u64) -> Result<f64, PipelineError> {
        let model = TrainedModel::fit(&self.train, spec, seed)?;
        let mut wrong = 0usize;
        for (row, &actual) in self.eval.rows().zip(&self.eval_labels) {
            let (predicted, _) = model.classify(row)?;
            wrong += usize::from(predicted != actual);
        }
        Ok(wrong as f64 / self.eval_labels.len().max(1) as f64)
    }

    /// Random search over `space`; every trial fits with the same `seed`.
    pub fn tune(
        &self,
        kind: ModelKind,
        space: &SearchSpace,
        budget: usize,
        seed: u64,
        parallel: bool,
    ) -> Result<SearchResult, TunerError> {
        let objective = |p: &Params| {
            let spec = kind.spec(p)?;
            self.misclassification(&spec, seed)
                .map_err(|e| e.to_string())
        };
        if parallel {
            search_parallel(space, objective, budget, seed)
        } else {
            search(space, objective, budget, seed)
        }
    }
}

// ---------------------------------------------------------------------------
// Online harness
// ---------------------------------------------------------------------------

/// A time-ordered stream of frames. Indices are zero-based.
pub trait FrameSource<T>: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn features(&self, index: usize) -> Result<Vec<T>, PipelineError>;
    fn label(&self, index: usize) -> Label;
}

/// Frames listed in a manifest, featurized with `preprocess`.
pub struct ManifestSource<'a> {
    pub manifest: &'a Manifest,
    pub preprocess: Preprocess,
}

impl<T: Scalar> FrameSource<T> for ManifestSource<'_> {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn features(&self, index: usize) -> Result<Vec<T>, PipelineError> {
        let img = load_image(&self.manifest.resolve(&self.manifest.entries[index]))
            .map_err(image_err("loading image"))?;
        self.preprocess
            .features(&img)
            .map_err(image_err("preprocessing"))
    }

    fn label(&self, index: usize) -> Label {
        self.manifest.entries[index].label
    }
}

/// Pre-extracted rows with labels.
pub struct MatrixSource<'a, T> {
    pub x: &'a FeatureMatrix<T>,
    pub labels: &'a [Label],
}

impl<T: Scalar> FrameSource<T> for MatrixSource<'_, T> {
    fn len(&self) -> usize {
        self.x.n()
    }

    fn features(&self, index: usize) -> Result<Vec<T>, PipelineError> {
        Ok(self.x.row(index).to_vec())
    }

    fn label(&self, index: usize) -> Label {
        self.labels[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Features(usize),
    Label(usize),
}

/// Wraps a source and records every read, for auditing the harness.
pub struct RecordingSource<S> {
    pub inner: S,
    log: Mutex<Vec<Access>>,
}

impl<S> RecordingSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Drains the accesses recorded so far.
    pub fn take(&self) -> Vec<Access> {
        std::mem::take(&mut *self.log.lock().unwrap())
    }
}

impl<T, S: FrameSource<T> + Send> FrameSource<T> for RecordingSource<S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn features(&self, index: usize) -> Result<Vec<T>, PipelineError> {
        self.log.lock().unwrap().push(Access::Features(index));
        self.inner.features(index)
    }

    fn label(&self, index: usize) -> Label {
        self.log.lock().unwrap().push(Access::Label(index));
        self.inner.label(index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    /// First step; the model at step `t` trains on the first `t` frames.
    pub start: usize,
    pub model: ModelSpec,
    pub pca: Option<usize>,
    pub warm_up_threshold: usize,
    /// Step `t` seeds its model with `mix_seed(base_seed, t)`.
    pub base_seed: u64,
    /// Unseen frames predicted after each step.
    pub lookahead: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            start: 10,
            model: ModelSpec::iforest(125),
            pca: None,
            warm_up_threshold: DEFAULT_WARM_UP,
            base_seed: 0,
            lookahead: 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// One-based stream position.
    pub position: usize,
    pub predicted: Label,
    pub score: f64,
    /// Ground truth, read for scoring only; absent for the last-seen frame.
    pub actual: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineStepRecord {
    pub step: usize,
    pub training_size: usize,
    pub seed: u64,
    pub last_seen: Prediction,
    pub unseen: Vec<Prediction>,
    pub first_unseen_correct: Option<bool>,
    pub warm_up: bool,
}

impl OnlineStepRecord {
    /// Correct predictions over all predictions at this step. The last-seen
    /// frame is assumed valid, as it was trained on.
    pub fn percent_correct(&self) -> f64 {
        let mut correct = usize::from(self.last_seen.predicted == Label::Valid);
        correct += self
            .unseen
            .iter()
            .filter(|p| Some(p.predicted) == p.actual)
            .count();
        100.0 * correct as f64 / (1 + self.unseen.len()) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSummary {
    pub steps: usize,
    pub first_unseen_accuracy: Option<f64>,
    pub warm_up_steps: usize,
    pub warm_up_first_unseen_accuracy: Option<f64>,
    pub steady_first_unseen_accuracy: Option<f64>,
    /// Largest number of step models alive at once.
    pub peak_live_models: usize,
    /// Step models still alive when the run returned.
    pub live_models_after: usize,
}

/// Model tied to a live-instance counter for the duration of one step.
struct StepModel<T> {
    model: TrainedModel<T>,
    scaler: Scaler<T>,
    pca: Option<PcaTransform<T>>,
    live: Arc<AtomicUsize>,
}

impl<T> Drop for StepModel<T> {
    fn drop(&mut self) {
        self.live.fetch_sub(1, Ordering::SeqCst);
    }
}

impl<T: Scalar> StepModel<T> {
    fn classify(&self, row: &[T]) -> Result<(Label, f64), PipelineError> {
        let mut r = row.to_vec();
        self.scaler
            .apply_row(&mut r)
            .map_err(feature_err("scaling"))?;
        if let Some(p) = &self.pca {
            r = p.project_row(&r).map_err(feature_err("projection"))?;
        }
        self.model.classify(&r)
    }
}

fn accuracy(flags: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags {
        n += 1;
        hit += usize::from(f);
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// Retrains from scratch at every step `t` in `start..len` on the first `t`
/// frames (their labels are never read), predicts frame `t` and the next
/// `lookahead` unseen frames, records, and drops the model.
pub fn run_online<T: Scalar, S: FrameSource<T> + ?Sized>(
    source: &S,
    config: &OnlineConfig,
) -> Result<(Vec<OnlineStepRecord>, OnlineSummary), PipelineError> {
    let n = source.len();
    if config.start < 2 {
        return Err(PipelineError::InvalidConfig(
            "online start step must be at least 2".into(),
        ));
    }
    if n <= config.start {
        return Err(PipelineError::InsufficientData {
            found: n,
            required: config.start + 1,
        });
    }
    let live = Arc::new(AtomicUsize::new(0));
    let mut peak = 0;
    let mut cache: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n - config.start);
    for t in config.start..n {
        let wrap = |e: PipelineError| PipelineError::Step {
            step: t,
            source: Box::new(e),
        };
        let last = (t + config.lookahead).min(n);
        while cache.len() < last {
            cache.push(source.features(cache.len()).map_err(wrap)?);
        }
        let x = FeatureMatrix::from_rows(&cache[..t])
            .map_err(|e| wrap(feature_err("assembling features")(e)))?;
        let seed = mix_seed(config.base_seed, t as u64);
        let step_model = {
            let scaler = Scaler::fit(&x).map_err(|e| wrap(feature_err("scaling")(e)))?;
            let mut z = x;
            scaler
                .apply_in_place(&mut z)
                .map_err(|e| wrap(feature_err("scaling")(e)))?;
            let (pca, z) = match config.pca {
                Some(k) => {
                    let (p, projected) = PcaTransform::fit_transform(&z, k)
                        .map_err(|e| wrap(feature_err("PCA")(e)))?;
                    (Some(p), projected)
                }
                None => (None, z),
            };
            let model = TrainedModel::fit(&z, &config.model, seed).map_err(wrap)?;
            live.fetch_add(1, Ordering::SeqCst);
            StepModel {
                model,
                scaler,
                pca,
                live: Arc::clone(&live),
            }
        };
        peak = peak.max(live.load(Ordering::SeqCst));
        let training_size = step_model.model.n_train();

        let (label, score) = step_model.classify(&cache[t - 1]).map_err(wrap)?;
        let last_seen = Prediction {
            position: t,
            predicted: label,
            score,
            actual: None,
        };
        let mut unseen = Vec::with_capacity(last - t);
        for i in t..last {
            let (predicted, score) = step_model.classify(&cache[i]).map_err(wrap)?;
            unseen.push(Prediction {
                position: i + 1,
                predicted,
                score,
                actual: Some(source.label(i)),
            });
        }
        drop(step_model);

        let first_unseen_correct = unseen.first().map(|p| Some(p.predicted) == p.actual);
        records.push(OnlineStepRecord {
            step: t,
            training_size,
            seed,
            last_seen,
            unseen,
            first_unseen_correct,
            warm_up: t < config.warm_up_threshold,
        });
    }
    let summary = OnlineSummary {
        steps: records.len(),
        first_unseen_accuracy: accuracy(records.iter().filter_map(|r| r.first_unseen_correct)),
        warm_up_steps: records.iter().filter(|r| r.warm_up).count(),
        warm_up_first_unseen_accuracy: accuracy(
            records
                .iter()
                .filter(|r| r.warm_up)
                .filter_map(|r| r.first_unseen_correct),
        ),
        steady_first_unseen_accuracy: accuracy(
            records
                .iter()
                .filter(|r| !r.warm_up)
                .filter_map(|r| r.first_unseen_correct),
        ),
        peak_live_models: peak,
        live_models_after: live.load(Ordering::SeqCst),
    };
    Ok((records, summary))
}

/// Tab-separated `step, training_size, percent_correct, first_unseen_correct,
/// warm_up`, with a header row.
pub fn emit_prediction_plot_data(records: &[OnlineStepRecord]) -> String {
    let mut s =
        String::from("step\ttraining_size\tpercent_correct\tfirst_unseen_correct\twarm_up\n");
    for r in records {
        let flag = match r.first_unseen_correct {
            Some(true) => "true",
            Some(false) => "false",
            None => "na",
        };
        let _ = writeln!(
            s,
            "{}\t{}\t{:.1}\t{}\t{}",
            r.step,
            r.training_size,
            r.percent_correct(),
            flag,
            r.warm_up
        );
    }
    s
}

pub fn online_records_jsonl(records: &[OnlineStepRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Where a trained bundle and its metadata go by convention.
pub fn default_bundle_path(dir: &Path) -> PathBuf {
    dir.join("bundle.fmxs")
}
