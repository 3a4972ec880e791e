//! Random hyperparameter search on misclassification rate.
//!
//! Points are drawn up front from one seeded stream, so the sampled sequence
//! does not depend on how many workers evaluate them. History is kept in trial
//! order and the earliest minimum wins.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Parameter name to value. Integer parameters are carried as whole floats.
pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Error, PartialEq)]
pub enum TunerError {
    #[error("budget must be at least 1")]
    EmptyBudget,
    #[error("search space has no parameters")]
    EmptySpace,
    #[error("parameter `{name}`: {reason}")]
    InvalidDomain { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Domain {
    /// Uniform on `(lo, hi]`, or log-uniform on `[lo, hi)` when `log` is set.
    Continuous {
        lo: f64,
        hi: f64,
        log: bool,
    },
    Discrete {
        values: Vec<f64>,
    },
}

impl Domain {
    fn validate(&self, name: &str) -> Result<(), TunerError> {
        let bad = |reason: &str| {
            Err(TunerError::InvalidDomain {
                name: name.into(),
                reason: reason.into(),
            })
        };
        match self {
            Domain::Continuous { lo, hi, log } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad("requires finite lo < hi");
                }
                if *log && *lo <= 0.0 {
                    return bad("log scale requires lo > 0");
                }
            }
            Domain::Discrete { values } => {
                if values.is_empty() {
                    return bad("discrete set is empty");
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return bad("discrete values must be finite");
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Domain::Continuous { lo, hi, log: false } => {
                let u: f64 = rng.gen();
                hi - (hi - lo) * u
            }
            Domain::Continuous { lo, hi, log: true } => {
                let u: f64 = rng.gen();
                (lo.ln() + (hi.ln() - lo.ln()) * u).exp().clamp(*lo, *hi)
            }
            Domain::Discrete { values } => values[rng.gen_range(0..values.len())],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: BTreeMap<String, Domain>,
}

impl SearchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn linear(mut self, name: &str, lo: f64, hi: f64) -> Self {
        self.params
            .insert(name.into(), Domain::Continuous { lo, hi, log: false });
        self
    }

    pub fn log(mut self, name: &str, lo: f64, hi: f64) -> Self {
        self.params
            .insert(name.into(), Domain::Continuous { lo, hi, log: true });
        self
    }

    pub fn discrete(mut self, name: &str, values: Vec<f64>) -> Self {
        self.params.insert(name.into(), Domain::Discrete { values });
        self
    }

    /// `gamma` log-uniform over `[1e-5, 10]`, `nu` uniform over `(0, 0.5]`.
    pub fn ocsvm_default() -> Self {
        Self::new().log("gamma", 1e-5, 1e1).linear("nu", 0.0, 0.5)
    }

    /// `trees` from `{25, 50, ..., 250}`.
    pub fn iforest_default() -> Self {
        Self::new().discrete("trees", (1..=10).map(|i| 25.0 * i as f64).collect())
    }

    pub fn validate(&self) -> Result<(), TunerError> {
        if self.params.is_empty() {
            return Err(TunerError::EmptySpace);
        }
        self.params
            .iter()
            .try_for_each(|(name, d)| d.validate(name))
    }

    /// Draws `budget` points. Parameters are sampled in name order.
    pub fn sample_points(&self, budget: usize, seed: u64) -> Vec<Params> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..budget)
            .map(|_| {
                self.params
                    .iter()
                    .map(|(k, d)| (k.clone(), d.sample(&mut rng)))
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub params: Params,
    /// Misclassification rate in `[0, 1]`; `1.0` when the objective failed.
    pub objective: f64,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrialRecord,
    pub history: Vec<TrialRecord>,
}

fn run_trial<F>(index: usize, params: Params, objective: &F) -> TrialRecord
where
    F: Fn(&Params) -> Result<f64, String>,
{
    let started = Instant::now();
    let outcome = objective(&params);
    let wall_time_secs = started.elapsed().as_secs_f64();
    let (objective, error) = match outcome {
        Ok(v) if v.is_finite() && (0.0..=1.0).contains(&v) => (v, None),
        Ok(v) => (1.0, Some(format!("objective {v} outside [0, 1]"))),
        Err(e) => (1.0, Some(e)),
    };
    TrialRecord {
        index,
        params,
        objective,
        failed: error.is_some(),
        error,
        wall_time_secs,
    }
}

fn finish(history: Vec<TrialRecord>) -> SearchResult {
    let mut best = &history[0];
    for t in &history[1..] {
        if t.objective < best.objective {
            best = t;
        }
    }
    SearchResult {
        best: best.clone(),
        history,
    }
}

/// Evaluates `budget` random points sequentially. Callback errors become
/// failed trials with objective `1.0` and the search carries on.
pub fn search<F>(
    space: &SearchSpace,
    objective: F,
    budget: usize,
    seed: u64,
) -> Result<SearchResult, TunerError>
where
    F: Fn(&Params) -> Result<f64, String>,
{
    if budget == 0 {
        return Err(TunerError::EmptyBudget);
    }
    space.validate()?;
    let history = space
        .sample_points(budget, seed)
        .into_iter()
        .enumerate()
        .map(|(i, p)| run_trial(i, p, &objective))
        .collect();
    Ok(finish(history))
}

/// Same points and winner as [`search`], with trials run on the rayon pool.
pub fn search_parallel<F>(
    space: &SearchSpace,
    objective: F,
    budget: usize,
    seed: u64,
) -> Result<SearchResult, TunerError>
where
    F: Fn(&Params) -> Result<f64, String> + Sync,
{
    if budget == 0 {
        return Err(TunerError::EmptyBudget);
    }
    space.validate()?;
    let history = space
        .sample_points(budget, seed)
        .into_par_iter()
        .enumerate()
        .map(|(i, p)| run_trial(i, p, &objective))
        .collect();
    Ok(finish(history))
}

/// One JSON object per line. With `with_timing == false` the wall time is
/// zeroed so two runs of the same search serialize identically.
pub fn history_jsonl(history: &[TrialRecord], with_timing: bool) -> String {
    let mut out = String::new();
    for t in history {
        let mut t = t.clone();
        if !with_timing {
            t.wall_time_secs = 0.0;
        }
        out.push_str(&serde_json::to_string(&t).expect("trial records serialize"));
        out.push('\n');
    }
    out
}

pub fn render_table(result: &SearchResult) -> String {
    let names: Vec<&String> = result.best.params.keys().collect();
    let mut out = String::new();
    let _ = write!(out, "{:>5}", "trial");
    for n in &names {
        let _ = write!(out, " {:>12}", n);
    }
    let _ = writeln!(out, " {:>10} {:>9}", "objective", "time_s");
    for t in &result.history {
        let _ = write!(out, "{:>5}", t.index);
        for n in &names {
            let _ = write!(out, " {:>12.6e}", t.params[*n]);
        }
        let flag = if t.failed { " (failed)" } else { "" };
        let _ = writeln!(
            out,
            " {:>10.4} {:>9.3}{flag}",
            t.objective, t.wall_time_secs
        );
    }
    let _ = write!(
        out,
        "best: trial {} objective {:.4}",
        result.best.index, result.best.objective
    );
    for n in &names {
        let _ = write!(out, " {}={}", n, result.best.params[*n]);
    }
    out.push('\n');
    out
}
