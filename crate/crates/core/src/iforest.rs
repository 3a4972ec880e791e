//! Isolation forest: parallel tree construction, path-length scoring and
//! threshold labelling.
//!
//! Trees are grown on `ψ` rows drawn without replacement. Each internal node
//! splits on a feature drawn uniformly from the features that are not
//! constant over the node's rows, at a value drawn uniformly from the open
//! interval `(min, max)`. Growth stops at depth `⌈log₂ ψ⌉`, at single rows,
//! or when every row in the node is identical.
//!
//! Tree `i` draws from a ChaCha8 stream selected by `(seed, i)`, so the forest
//! does not depend on how rayon schedules the builds.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::container::{FormatError, RawMatrix, SectionFile};
use crate::features::FeatureMatrix;
use crate::scalar::Scalar;
use crate::Label;

pub const EULER_GAMMA: f64 = 0.577_215_664_9;

#[derive(Debug, Error)]
pub enum IForestError {
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("dimension mismatch: model expects {expected} features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Average path length of an unsuccessful search in a binary search tree
/// built on `n` points: `c(n) = 2 H(n−1) − 2(n−1)/n` with
/// `H(i) ≈ ln i + γ_E`, and `c(0) = c(1) = 0`.
pub fn average_path_length(n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let m = (n - 1) as f64;
    2.0 * (m.ln() + EULER_GAMMA) - 2.0 * m / n as f64
}

/// `2^(−mean_path / c(ψ))`; `0.5` when `c(ψ) = 0` (a one-row subsample
/// carries no information).
pub fn score_from_path(mean_path: f64, normalizer: f64) -> f64 {
    if normalizer <= 0.0 {
        return 0.5;
    }
    (-mean_path / normalizer).exp2()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum MaxSamples {
    /// `ψ = round(fraction · n)`, clamped to `[1, n]`.
    Fraction(f64),
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IForestParams {
    pub trees: usize,
    pub max_samples: MaxSamples,
    pub contamination: f64,
    pub seed: u64,
}

impl Default for IForestParams {
    fn default() -> Self {
        Self {
            trees: 125,
            max_samples: MaxSamples::Fraction(1.0),
            contamination: 0.0,
            seed: 0,
        }
    }
}

impl IForestParams {
    fn subsample_size(&self, n: usize) -> Result<usize, IForestError> {
        match self.max_samples {
            MaxSamples::Fraction(f) if f > 0.0 && f <= 1.0 => {
                Ok(((f * n as f64).round() as usize).clamp(1, n))
            }
            MaxSamples::Count(c) if c >= 1 && c <= n => Ok(c),
            other => Err(IForestError::InvalidHyperparameter(format!(
                "max_samples {other:?} invalid for n = {n}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node<T> {
    Internal {
        feature: usize,
        split: T,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree<T> {
    nodes: Vec<Node<T>>,
    height_limit: usize,
}

/// Indices sampled for one tree, kept so tests can check the subsample.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeBuild<T> {
    pub tree: IsolationTree<T>,
    pub sample: Vec<usize>,
}

impl<T: Scalar> IsolationTree<T> {
    pub fn height_limit_for(psi: usize) -> usize {
        if psi <= 1 {
            0
        } else {
            (psi as f64).log2().ceil() as usize
        }
    }

    /// Grows a tree on the given rows of `x`.
    pub fn grow(x: &FeatureMatrix<T>, rows: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let height_limit = Self::height_limit_for(rows.len());
        let mut tree = Self {
            nodes: Vec::with_capacity(2 * rows.len()),
            height_limit,
        };
        let mut scratch = rows.to_vec();
        tree.grow_node(x, &mut scratch, 0, rng);
        tree
    }

    fn grow_node(
        &mut self,
        x: &FeatureMatrix<T>,
        rows: &mut [usize],
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { size: rows.len() });
        if depth >= self.height_limit || rows.len() <= 1 {
            return id;
        }
        let Some((feature, lo, hi)) = pick_feature(x, rows, rng) else {
            return id;
        };
        let split = draw_split(lo, hi, rng);
        // Partition in place: rows with value < split first.
        let mut mid = 0;
        for k in 0..rows.len() {
            if x.get(rows[k], feature) < split {
                rows.swap(mid, k);
                mid += 1;
            }
        }
        debug_assert!(mid > 0 && mid < rows.len());
        let (left_rows, right_rows) = rows.split_at_mut(mid);
        let left = self.grow_node(x, left_rows, depth + 1, rng);
        let right = self.grow_node(x, right_rows, depth + 1, rng);
        self.nodes[id] = Node::Internal {
            feature,
            split,
            left,
            right,
        };
        id
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn height_limit(&self) -> usize {
        self.height_limit
    }

    /// Depth of the external node reached by `x`, plus `c(size)` for the rows
    /// left unseparated there.
    pub fn path_length(&self, x: &[T]) -> f64 {
        let mut id = 0;
        let mut depth = 0usize;
        loop {
            match self.nodes[id] {
                Node::Internal {
                    feature,
                    split,
                    left,
                    right,
                } => {
                    id = if x[feature] < split { left } else { right };
                    depth += 1;
                }
                Node::Leaf { size } => return depth as f64 + average_path_length(size),
            }
        }
    }

    /// Maximum leaf depth.
    pub fn depth(&self) -> usize {
        fn walk<T>(nodes: &[Node<T>], id: usize) -> usize {
            match nodes[id] {
                Node::Internal { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Picks a feature uniformly among those not constant over `rows` and
/// returns it with its `(min, max)` over the rows. `None` when every row is
/// identical.
fn pick_feature<T: Scalar>(
    x: &FeatureMatrix<T>,
    rows: &[usize],
    rng: &mut ChaCha8Rng,
) -> Option<(usize, T, T)> {
    let p = x.p();
    let range = |f: usize| {
        let mut lo = x.get(rows[0], f);
        let mut hi = lo;
        for &r in &rows[1..] {
            let v = x.get(r, f);
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    };
    // Rejection sampling is uniform over non-constant features; bail out to a
    // full scan once constant features dominate.
    for _ in 0..32.min(4 * p) {
        let f = rng.gen_range(0..p);
        let (lo, hi) = range(f);
        if lo < hi {
            return Some((f, lo, hi));
        }
    }
    let candidates: Vec<(usize, T, T)> = (0..p)
        .filter_map(|f| {
            let (lo, hi) = range(f);
            (lo < hi).then_some((f, lo, hi))
        })
        .collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.gen_range(0..candidates.len())])
    }
}

/// Uniform draw from the open interval `(lo, hi)`.
fn draw_split<T: Scalar>(lo: T, hi: T, rng: &mut ChaCha8Rng) -> T {
    for _ in 0..16 {
        let v = rng.gen_range(lo..hi);
        if v > lo && v < hi {
            return v;
        }
    }
    let mid = lo + (hi - lo) * T::lit(0.5);
    if mid > lo && mid < hi {
        mid
    } else {
        hi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IForestModel<T> {
    trees: Vec<IsolationTree<T>>,
    psi: usize,
    n_train: usize,
    n_features: usize,
    contamination: f64,
    threshold: f64,
    seed: u64,
}

/// RNG for tree `index` of a forest seeded with `seed`.
pub fn tree_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Builds tree `index` exactly as [`IForestModel::fit`] does.
pub fn build_tree<T: Scalar>(
    x: &FeatureMatrix<T>,
    psi: usize,
    seed: u64,
    index: usize,
) -> TreeBuild<T> {
    let mut rng = tree_rng(seed, index);
    let mut rows = sample(&mut rng, x.n(), psi).into_vec();
    rows.sort_unstable();
    let tree = IsolationTree::grow(x, &rows, &mut rng);
    TreeBuild { tree, sample: rows }
}

impl<T: Scalar> IForestModel<T> {
    pub fn fit(x: &FeatureMatrix<T>, params: &IForestParams) -> Result<Self, IForestError> {
        let n = x.n();
        if n < 2 {
            return Err(IForestError::InvalidHyperparameter(format!(
                "need at least 2 training rows, got {n}"
            )));
        }
        if params.trees == 0 {
            return Err(IForestError::InvalidHyperparameter(
                "tree count must be at least 1".into(),
            ));
        }
        if !(0.0..=0.5).contains(&params.contamination) {
            return Err(IForestError::InvalidHyperparameter(format!(
                "contamination must be in [0, 0.5], got {}",
                params.contamination
            )));
        }
        let psi = params.subsample_size(n)?;
        let trees: Vec<IsolationTree<T>> = (0..params.trees)
            .into_par_iter()
            .map(|i| build_tree(x, psi, params.seed, i).tree)
            .collect();
        let mut model = Self {
            trees,
            psi,
            n_train: n,
            n_features: x.p(),
            contamination: params.contamination,
            threshold: 0.5,
            seed: params.seed,
        };
        if model.trees.iter().all(|t| t.nodes.len() == 1) {
            log::warn!(
                "isolation forest training rows are all identical; every score will be equal"
            );
        }
        if params.contamination > 0.0 {
            let mut scores = model.score_batch(x)?;
            scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
            model.threshold = quantile_sorted(&scores, 1.0 - params.contamination);
        }
        Ok(model)
    }

    pub fn trees(&self) -> &[IsolationTree<T>] {
        &self.trees
    }

    pub fn psi(&self) -> usize {
        self.psi
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn input_width(&self) -> usize {
        self.n_features
    }

    pub fn contamination(&self) -> f64 {
        self.contamination
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_width(&self, found: usize) -> Result<(), IForestError> {
        if found != self.n_features {
            return Err(IForestError::DimensionMismatch {
                expected: self.n_features,
                found,
            });
        }
        Ok(())
    }

    pub fn mean_path_length(&self, x: &[T]) -> Result<f64, IForestError> {
        self.check_width(x.len())?;
        let total: f64 = self.trees.iter().map(|t| t.path_length(x)).sum();
        Ok(total / self.trees.len() as f64)
    }

    /// Score in `(0, 1)`; higher means easier to isolate.
    pub fn anomaly_score(&self, x: &[T]) -> Result<f64, IForestError> {
        Ok(score_from_path(
            self.mean_path_length(x)?,
            average_path_length(self.psi),
        ))
    }

    pub fn score_batch(&self, x: &FeatureMatrix<T>) -> Result<Vec<f64>, IForestError> {
        self.check_width(x.p())?;
        let rows: Vec<&[T]> = x.rows().collect();
        rows.par_iter().map(|r| self.anomaly_score(r)).collect()
    }

    pub fn predict(&self, x: &[T]) -> Result<Label, IForestError> {
        Ok(label_from_score(self.anomaly_score(x)?, self.threshold))
    }

    pub fn write_sections(&self, file: &mut SectionFile) {
        let mut offsets = vec![0.0];
        let mut values = Vec::new();
        for tree in &self.trees {
            for node in &tree.nodes {
                match *node {
                    Node::Internal {
                        feature,
                        split,
                        left,
                        right,
                    } => values.extend_from_slice(&[
                        feature as f64,
                        split.to_f64_lossless(),
                        left as f64,
                        right as f64,
                        -1.0,
                    ]),
                    Node::Leaf { size } => {
                        values.extend_from_slice(&[-1.0, 0.0, 0.0, 0.0, size as f64])
                    }
                }
            }
            offsets.push((values.len() / 5) as f64);
        }
        let heights: Vec<f64> = self.trees.iter().map(|t| t.height_limit as f64).collect();
        file.push_matrix("iforest_nodes", RawMatrix::new(values.len() / 5, 5, values));
        file.push_scalars("iforest_tree_offsets", &offsets);
        file.push_scalars("iforest_height_limits", &heights);
        file.push_scalars(
            "iforest_scalars",
            &[
                self.psi as f64,
                self.n_train as f64,
                self.n_features as f64,
                self.contamination,
                self.threshold,
            ],
        );
        file.push_text("iforest_seed", self.seed.to_string());
    }

    pub fn read_sections(file: &SectionFile) -> Result<Self, IForestError> {
        let bad = |detail: String| {
            IForestError::Format(FormatError::BadSection {
                name: "iforest_nodes".into(),
                detail,
            })
        };
        let nodes = file.matrix("iforest_nodes")?;
        if nodes.cols != 5 {
            return Err(bad(format!("expected 5 columns, found {}", nodes.cols)));
        }
        let offsets = &file.matrix("iforest_tree_offsets")?.values;
        let heights = file.scalars("iforest_height_limits", offsets.len().saturating_sub(1))?;
        let s = file.scalars("iforest_scalars", 5)?;
        let seed: u64 = file
            .text("iforest_seed")?
            .parse()
            .map_err(|_| bad("unparsable seed".into()))?;
        let n_features = s[2] as usize;
        let mut trees = Vec::with_capacity(heights.len());
        for (t, w) in offsets.windows(2).enumerate() {
            let (start, end) = (w[0] as usize, w[1] as usize);
            if start >= end || end > nodes.rows {
                return Err(bad(format!("tree {t} offsets out of range")));
            }
            let len = end - start;
            let mut tree_nodes = Vec::with_capacity(len);
            for r in &nodes.values[start * 5..end * 5]
                .chunks_exact(5)
                .collect::<Vec<_>>()
            {
                if r[0] < 0.0 {
                    tree_nodes.push(Node::Leaf {
                        size: r[4] as usize,
                    });
                } else {
                    let (feature, left, right) = (r[0] as usize, r[2] as usize, r[3] as usize);
                    if feature >= n_features || left >= len || right >= len {
                        return Err(bad(format!("tree {t} has out-of-range references")));
                    }
                    tree_nodes.push(Node::Internal {
                        feature,
                        split: T::lit(r[1]),
                        left,
                        right,
                    });
                }
            }
            trees.push(IsolationTree {
                nodes: tree_nodes,
                height_limit: heights[t] as usize,
            });
        }
        if trees.is_empty() {
            return Err(bad("forest has no trees".into()));
        }
        Ok(Self {
            trees,
            psi: s[0] as usize,
            n_train: s[1] as usize,
            n_features,
            contamination: s[3],
            threshold: s[4],
            seed,
        })
    }
}

/// `-1` when the score exceeds the threshold; ties count as valid.
pub fn label_from_score(score: f64, threshold: f64) -> Label {
    if score > threshold {
        Label::Anomalous
    } else {
        Label::Valid
    }
}

/// Linear-interpolation quantile of ascending `sorted`.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> FeatureMatrix<f64> {
        FeatureMatrix::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn normalizer_values() {
        assert_eq!(average_path_length(0), 0.0);
        assert_eq!(average_path_length(1), 0.0);
        assert!((average_path_length(2) - 0.154_431_329_8).abs() < 1e-9);
    }

    #[test]
    fn score_identities() {
        let c = average_path_length(256);
        assert_eq!(score_from_path(c, c), 0.5);
        assert_eq!(score_from_path(2.0 * c, c), 0.25);
        assert!((score_from_path(1e-12, c) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn label_rule() {
        assert_eq!(label_from_score(0.7, 0.5), Label::Anomalous);
        assert_eq!(label_from_score(0.3, 0.5), Label::Valid);
        assert_eq!(label_from_score(0.5, 0.5), Label::Valid);
    }

    #[test]
    fn single_row_tree_has_zero_path() {
        let x = line(4);
        let mut rng = tree_rng(1, 0);
        let tree = IsolationTree::grow(&x, &[2], &mut rng);
        assert_eq!(tree.nodes().len(), 1);
        assert_eq!(tree.path_length(&[100.0]), 0.0);
    }

    #[test]
    fn two_row_tree_routes_to_depth_one() {
        let x = line(2);
        let mut rng = tree_rng(5, 0);
        let tree = IsolationTree::grow(&x, &[0, 1], &mut rng);
        assert_eq!(tree.height_limit(), 1);
        assert_eq!(tree.path_length(&[0.0]), 1.0);
        assert_eq!(tree.path_length(&[1.0]), 1.0);
    }

    #[test]
    fn splits_lie_strictly_inside_node_range() {
        let x = FeatureMatrix::new(
            64,
            3,
            (0..192).map(|i| ((i * 31 % 17) as f64).sqrt()).collect(),
        )
        .unwrap();
        let b = build_tree(&x, 64, 9, 0);
        fn check(
            x: &FeatureMatrix<f64>,
            nodes: &[Node<f64>],
            id: usize,
            rows: Vec<usize>,
            depth: usize,
            limit: usize,
        ) {
            match nodes[id] {
                Node::Internal {
                    feature,
                    split,
                    left,
                    right,
                } => {
                    let vals: Vec<f64> = rows.iter().map(|&r| x.get(r, feature)).collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert!(lo < split && split < hi);
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&r| x.get(r, feature) < split);
                    check(x, nodes, left, l, depth + 1, limit);
                    check(x, nodes, right, r, depth + 1, limit);
                }
                Node::Leaf { size } => {
                    assert_eq!(size, rows.len());
                    assert!(depth <= limit);
                }
            }
        }
        check(
            &x,
            b.tree.nodes(),
            0,
            b.sample.clone(),
            0,
            b.tree.height_limit(),
        );
    }

    #[test]
    fn default_settings_give_full_subsample_and_half_threshold() {
        let x = line(50);
        let m = IForestModel::fit(&x, &IForestParams::default()).unwrap();
        assert_eq!(m.psi(), 50);
        assert_eq!(m.threshold(), 0.5);
        assert_eq!(m.trees().len(), 125);
    }

    #[test]
    fn contamination_sets_quantile_threshold() {
        let x = line(100);
        let m = IForestModel::fit(
            &x,
            &IForestParams {
                contamination: 0.1,
                ..IForestParams::default()
            },
        )
        .unwrap();
        let flagged = (0..100)
            .filter(|&i| m.predict(&[i as f64]).unwrap() == Label::Anomalous)
            .count();
        assert!((5..=15).contains(&flagged), "{flagged}");
        assert!(m.threshold() > 0.0 && m.threshold() < 1.0);
    }

    #[test]
    fn identical_rows_are_degenerate_but_valid() {
        let x = FeatureMatrix::new(10, 2, vec![1.0; 20]).unwrap();
        let m = IForestModel::fit(
            &x,
            &IForestParams {
                trees: 5,
                ..IForestParams::default()
            },
        )
        .unwrap();
        let a = m.anomaly_score(&[1.0, 1.0]).unwrap();
        let b = m.anomaly_score(&[5.0, -3.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_parameters() {
        let x = line(10);
        let bad = [
            IForestParams {
                trees: 0,
                ..IForestParams::default()
            },
            IForestParams {
                contamination: 0.6,
                ..IForestParams::default()
            },
            IForestParams {
                max_samples: MaxSamples::Count(11),
                ..IForestParams::default()
            },
            IForestParams {
                max_samples: MaxSamples::Fraction(0.0),
                ..IForestParams::default()
            },
        ];
        for p in bad {
            assert!(matches!(
                IForestModel::fit(&x, &p),
                Err(IForestError::InvalidHyperparameter(_))
            ));
        }
        assert!(IForestModel::fit(&line(1), &IForestParams::default()).is_err());
        let m = IForestModel::fit(&x, &IForestParams::default()).unwrap();
        assert!(matches!(
            m.anomaly_score(&[1.0, 2.0]),
            Err(IForestError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn persistence_is_bit_exact() {
        let x = FeatureMatrix::new(40, 3, (0..120).map(|i| (i as f64 * 0.731).sin()).collect())
            .unwrap();
        let m = IForestModel::fit(
            &x,
            &IForestParams {
                trees: 7,
                seed: u64::MAX - 3,
                ..IForestParams::default()
            },
        )
        .unwrap();
        let mut f = SectionFile::new();
        m.write_sections(&mut f);
        let back =
            IForestModel::<f64>::read_sections(&SectionFile::from_bytes(&f.to_bytes()).unwrap())
                .unwrap();
        assert_eq!(back, m);
    }
}
