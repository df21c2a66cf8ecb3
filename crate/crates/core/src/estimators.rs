//! Estimators of the maximum expected value `max_a E[Q_a]`.
//!
//! * single: `max_a mean(samples_a)`, biased upward whenever more than one
//!   action can win.
//! * double: pick the argmax with one independent sample set, report the
//!   other set's mean at that action. Biased downward.
//! * cross: the K-set generalization; set `i` selects, set `j != i` evaluates.
//!
//! [`estimator_bias_mc`] measures each estimator's expectation by Monte Carlo
//! against a discrete ground-truth [`DistributionSpec`].

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};
use crate::util::argmax;

/// Per-action sample lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSamples {
    per_action: Vec<Vec<f64>>,
}

impl ActionSamples {
    pub fn new(per_action: Vec<Vec<f64>>) -> Result<Self> {
        if per_action.is_empty() {
            return Err(Error::Estimation("need at least one action".into()));
        }
        Ok(Self { per_action })
    }

    pub fn num_actions(&self) -> usize {
        self.per_action.len()
    }

    pub fn samples(&self, action: usize) -> &[f64] {
        &self.per_action[action]
    }

    /// Sample mean of every action.
    pub fn means(&self) -> Result<Vec<f64>> {
        self.per_action
            .iter()
            .enumerate()
            .map(|(a, xs)| {
                if xs.is_empty() {
                    Err(Error::Estimation(format!("action {a} has no samples")))
                } else {
                    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ASelects,
    BSelects,
}

pub fn single_max_estimate(samples: &ActionSamples) -> Result<f64> {
    let means = samples.means()?;
    Ok(means.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn double_estimate(
    samples_a: &ActionSamples,
    samples_b: &ActionSamples,
    direction: Direction,
) -> Result<f64> {
    if samples_a.num_actions() != samples_b.num_actions() {
        return Err(Error::Estimation(format!(
            "sample sets cover {} and {} actions",
            samples_a.num_actions(),
            samples_b.num_actions()
        )));
    }
    let (selector, evaluator) = match direction {
        Direction::ASelects => (samples_a, samples_b),
        Direction::BSelects => (samples_b, samples_a),
    };
    select_then_evaluate(selector, evaluator)
}

pub fn cross_estimate(sample_sets: &[ActionSamples], selector: usize, evaluator: usize) -> Result<f64> {
    let k = sample_sets.len();
    if k < 2 {
        return Err(Error::Estimation(format!("cross estimator needs K >= 2, got {k}")));
    }
    if selector == evaluator {
        return Err(Error::Estimation("selector and evaluator must differ".into()));
    }
    if selector >= k || evaluator >= k {
        return Err(Error::Estimation(format!(
            "set index out of range: ({selector}, {evaluator}) with K = {k}"
        )));
    }
    let actions = sample_sets[0].num_actions();
    if sample_sets.iter().any(|s| s.num_actions() != actions) {
        return Err(Error::Estimation("sample sets cover different action counts".into()));
    }
    select_then_evaluate(&sample_sets[selector], &sample_sets[evaluator])
}

fn select_then_evaluate(selector: &ActionSamples, evaluator: &ActionSamples) -> Result<f64> {
    let best = argmax(&selector.means()?);
    let xs = evaluator.samples(best);
    if xs.is_empty() {
        return Err(Error::Estimation(format!("evaluating set has no samples for action {best}")));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// A finite discrete distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDist {
    support: Vec<f64>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(Error::config(format!(
                "support has {} values but {} probabilities",
                support.len(),
                probs.len()
            )));
        }
        if support.iter().any(|v| !v.is_finite()) || probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::config("support must be finite and probabilities non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("probabilities sum to {total}, not 1")));
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self {
            support,
            probs,
            cumulative,
        })
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(x, p)| x * p).sum()
    }

    pub fn sample(&self, rng: &mut SimRng) -> f64 {
        let u: f64 = rng.random();
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.support.len() - 1);
        self.support[idx]
    }
}

/// Ground-truth reward distribution per action.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSpec {
    actions: Vec<DiscreteDist>,
}

impl DistributionSpec {
    pub fn new(actions: Vec<DiscreteDist>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::config("distribution spec needs at least one action"));
        }
        Ok(Self { actions })
    }

    pub fn actions(&self) -> &[DiscreteDist] {
        &self.actions
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn true_means(&self) -> Vec<f64> {
        self.actions.iter().map(DiscreteDist::mean).collect()
    }

    pub fn true_max_mean(&self) -> f64 {
        self.true_means().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Draw one independent sample set with `n` samples per action.
    pub fn draw(&self, n: usize, rng: &mut SimRng) -> ActionSamples {
        ActionSamples {
            per_action: self
                .actions
                .iter()
                .map(|d| (0..n).map(|_| d.sample(rng)).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Single,
    Double,
    Cross,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Single => "single",
            EstimatorKind::Double => "double",
            EstimatorKind::Cross => "cross",
        }
    }

    /// Number of independent sample sets the estimator consumes.
    fn check_sets(self, k: usize) -> Result<()> {
        let ok = match self {
            EstimatorKind::Single => k == 1,
            EstimatorKind::Double => k == 2,
            EstimatorKind::Cross => k >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{} estimator cannot use K = {k} (single: 1, double: 2, cross: >= 2)",
                self.name()
            )))
        }
    }
}

/// Monte-Carlo mean of an estimator and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Run `trials` independent draws of the chosen estimator.
///
/// Each trial draws `k` sample sets (one for single, two for double) with
/// `n_per_action` samples per action. Cross trials pick an ordered
/// (selector, evaluator) pair uniformly among the `k (k - 1)` choices.
pub fn estimator_bias_mc(
    dist: &DistributionSpec,
    kind: EstimatorKind,
    k: usize,
    n_per_action: usize,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    kind.check_sets(k)?;
    if trials == 0 {
        return Err(Error::config("trials must be >= 1"));
    }
    if n_per_action == 0 {
        return Err(Error::config("n_per_action must be >= 1"));
    }
    let mut rng = rng::stream(seed, "estimators");
    let mut count = 0.0;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for _ in 0..trials {
        let sets: Vec<ActionSamples> = (0..k).map(|_| dist.draw(n_per_action, &mut rng)).collect();
        let x = match kind {
            EstimatorKind::Single => single_max_estimate(&sets[0])?,
            EstimatorKind::Double => double_estimate(&sets[0], &sets[1], Direction::ASelects)?,
            EstimatorKind::Cross => {
                let i = rng.random_range(0..k);
                let mut j = rng.random_range(0..k - 1);
                if j >= i {
                    j += 1;
                }
                cross_estimate(&sets, i, j)?
            }
        };
        count += 1.0;
        let delta = x - mean;
        mean += delta / count;
        m2 += delta * (x - mean);
    }
    let std_error = if trials > 1 {
        (m2 / (count - 1.0)).sqrt() / count.sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error,
        trials,
    })
}

/// One estimator configuration to evaluate in a study.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorRun {
    pub kind: EstimatorKind,
    #[serde(rename = "K")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionFile {
    support: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyFile {
    name: String,
    n_per_action: usize,
    run: Vec<EstimatorRun>,
    action: Vec<ActionFile>,
}

/// A distribution plus the estimator runs to measure on it, as read from a
/// study file.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorStudy {
    pub name: String,
    pub n_per_action: usize,
    pub runs: Vec<EstimatorRun>,
    pub dist: DistributionSpec,
}

/// One CSV row of [`EstimatorStudy::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub kind: EstimatorKind,
    pub k: usize,
    pub n_per_action: usize,
    pub estimate: McEstimate,
    pub true_max_mean: f64,
}

impl StudyRow {
    pub fn bias(&self) -> f64 {
        self.estimate.mean - self.true_max_mean
    }
}

pub const STUDY_CSV_HEADER: &str = "kind,K,n_per_action,trials,mean_estimate,std_error,true_max_mean";

impl EstimatorStudy {
    pub fn parse(text: &str) -> Result<Self> {
        let file: StudyFile =
            toml::from_str(text).map_err(|e| Error::parse("estimator study", e.to_string()))?;
        let actions = file
            .action
            .into_iter()
            .map(|a| DiscreteDist::new(a.support, a.probs))
            .collect::<Result<Vec<_>>>()?;
        let dist = DistributionSpec::new(actions)?;
        for r in &file.run {
            r.kind.check_sets(r.k)?;
        }
        Ok(Self {
            name: file.name,
            n_per_action: file.n_per_action,
            runs: file.run,
            dist,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn run(&self, trials: usize, seed: u64) -> Result<Vec<StudyRow>> {
        let truth = self.dist.true_max_mean();
        self.runs
            .iter()
            .map(|r| {
                Ok(StudyRow {
                    kind: r.kind,
                    k: r.k,
                    n_per_action: self.n_per_action,
                    estimate: estimator_bias_mc(&self.dist, r.kind, r.k, self.n_per_action, trials, seed)?,
                    true_max_mean: truth,
                })
            })
            .collect()
    }

    pub fn is_asymmetric(&self) -> bool {
        let means = self.dist.true_means();
        means.windows(2).any(|w| w[0] != w[1])
    }
}

pub fn study_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from(STUDY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.kind.name(),
            r.k,
            r.n_per_action,
            r.estimate.trials,
            r.estimate.mean,
            r.estimate.std_error,
            r.true_max_mean
        );
    }
    out
}

/// Study files shipped with the crate, by name.
pub fn shipped_studies() -> Vec<(&'static str, &'static str)> {
    vec![
        ("fair_coins", include_str!("../specs/fair_coins.toml")),
        ("skewed_coins", include_str!("../specs/skewed_coins.toml")),
        ("rare_jackpot", include_str!("../specs/rare_jackpot.toml")),
    ]
}
