//! Synthetic data, plug-in classification error and the paired experiment
//! comparing the complete-data, mechanism-aware and mechanism-ignoring
//! classifiers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::data::PartialDataset;
use crate::em::{self, FitOptions};
use crate::error::{Error, Result};
use crate::mechanism::{log_probs, predictor, MechanismFamily, MechanismFeatures, MechanismSpec};
use crate::mixture::MixtureParams;
use crate::rng;

pub const BOOTSTRAP_RESAMPLES: usize = 2000;
/// Above this fraction of failed fits the report is flagged.
pub const FAILURE_FLAG_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    /// Supervised MLE on the same rows with every label revealed.
    Complete,
    /// Joint fit of mixture and mechanism (true family, unknown `xi`).
    PartialFull,
    /// EM on the likelihood that ignores the mechanism.
    PartialIgnorable,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Self::Complete, Self::PartialFull, Self::PartialIgnorable];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Complete => "COMPLETE",
            Self::PartialFull => "PARTIAL_FULL",
            Self::PartialIgnorable => "PARTIAL_IGNORABLE",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub theta_true: MixtureParams,
    pub mechanism: MechanismSpec,
    pub n: usize,
    pub n_test: usize,
    pub replicates: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
    /// Options for the partial-label fitters. Their `seed` is replaced per
    /// replicate by a derived stream seed.
    pub fit: FitOptions,
}

impl ScenarioConfig {
    pub const DEFAULT_N_TEST: usize = 100_000;

    pub fn new(theta_true: MixtureParams, mechanism: MechanismSpec, n: usize, replicates: usize, seed: u64) -> Self {
        Self {
            theta_true,
            mechanism,
            n,
            n_test: Self::DEFAULT_N_TEST,
            replicates,
            seed,
            estimators: Estimator::ALL.to_vec(),
            fit: FitOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::InvalidConfig(format!("n must be at least 10, got {}", self.n)));
        }
        if self.replicates < 1 {
            return Err(Error::InvalidConfig("replicates must be at least 1".into()));
        }
        if self.n_test < 1 {
            return Err(Error::InvalidConfig("n_test must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("at least one estimator is required".into()));
        }
        let mut sorted = self.estimators.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.estimators.len() {
            return Err(Error::InvalidConfig("estimators must not repeat".into()));
        }
        self.mechanism.check_params(&self.theta_true)?;
        if self.mechanism.family() == MechanismFamily::MnarClass && !self.fit.homoscedastic {
            return Err(Error::InvalidConfig("MNAR_CLASS needs a homoscedastic fit".into()));
        }
        self.fit.validate()
    }
}

/// Draws `n` rows `(y, z, m)`: `z ~ pi`, `y ~ f_z`, `m ~ Bernoulli(q(y, z))`.
pub fn generate_dataset<R: Rng + ?Sized>(
    theta: &MixtureParams,
    spec: &MechanismSpec,
    n: usize,
    rng: &mut R,
) -> Result<PartialDataset> {
    spec.check_params(theta)?;
    let p = theta.dim();
    let mut features = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    let mut missing = Vec::with_capacity(n);
    let mut y = vec![0.0; p];
    for _ in 0..n {
        let z = theta.draw(rng, &mut y);
        let q = miss_prob_unchecked(theta, spec, &y, z);
        features.extend_from_slice(&y);
        labels.push(z);
        missing.push(rng.random::<f64>() < q);
    }
    PartialDataset::new(p, theta.n_components(), features, labels, missing)
}

fn miss_prob_unchecked(theta: &MixtureParams, spec: &MechanismSpec, y: &[f64], z: usize) -> f64 {
    let features = MechanismFeatures::compute(y, spec.family(), theta).expect("checked by caller");
    log_probs(predictor(spec.family(), spec.xi(), &features, z).eta).q
}

/// Dataset of replicate `replicate`, from stream `replicate/{r}/generate`.
pub fn generate(config: &ScenarioConfig, replicate: usize) -> Result<PartialDataset> {
    config.validate()?;
    let mut r = rng::stream(config.seed, &format!("replicate/{replicate}/generate"));
    generate_dataset(&config.theta_true, &config.mechanism, config.n, &mut r)
}

/// Monte-Carlo estimate of `E[q(y, z)]` under `theta`.
pub fn expected_missing_rate(theta: &MixtureParams, spec: &MechanismSpec, n_mc: usize, seed: u64) -> Result<f64> {
    spec.check_params(theta)?;
    let mut r = rng::stream(seed, "missing-rate");
    let mut y = vec![0.0; theta.dim()];
    let total: f64 = (0..n_mc)
        .map(|_| {
            let z = theta.draw(&mut r, &mut y);
            miss_prob_unchecked(theta, spec, &y, z)
        })
        .sum();
    Ok(total / n_mc as f64)
}

/// Shifts every intercept of `spec` by a common offset so that the expected
/// missing rate under `theta` is `target`. Uses one fixed Monte-Carlo sample,
/// so the rate is monotone in the offset and bisection is exact on it.
pub fn calibrate_intercept(
    theta: &MixtureParams,
    spec: &MechanismSpec,
    target: f64,
    n_mc: usize,
    seed: u64,
) -> Result<MechanismSpec> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidConfig(format!("target missing rate {target} outside (0, 1)")));
    }
    spec.check_params(theta)?;
    let mut r = rng::stream(seed, "calibrate");
    let mut y = vec![0.0; theta.dim()];
    let rows: Vec<(MechanismFeatures, usize)> = (0..n_mc)
        .map(|_| {
            let z = theta.draw(&mut r, &mut y);
            (MechanismFeatures::compute(&y, spec.family(), theta).expect("checked"), z)
        })
        .collect();
    let shifted = |offset: f64| -> MechanismSpec {
        let mut xi = spec.xi().to_vec();
        let step = if spec.family() == MechanismFamily::MnarClass { 2 } else { xi.len() };
        for i in (0..xi.len()).step_by(step) {
            xi[i] += offset;
        }
        spec.with_xi(xi).expect("finite")
    };
    let rate = |s: &MechanismSpec| -> f64 {
        rows.iter()
            .map(|(f, z)| log_probs(predictor(s.family(), s.xi(), f, *z).eta).q)
            .sum::<f64>()
            / rows.len() as f64
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(&shifted(mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(shifted(0.5 * (lo + hi)))
}

/// Labelled test points drawn from the true model.
#[derive(Debug, Clone)]
pub struct TestSet {
    p: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl TestSet {
    pub fn draw(theta_true: &MixtureParams, n_test: usize, seed: u64) -> Self {
        let p = theta_true.dim();
        let mut r = rng::stream(seed, "test");
        let mut features = vec![0.0; n_test * p];
        let labels = features
            .chunks_exact_mut(p)
            .map(|y| theta_true.draw(&mut r, y))
            .collect();
        Self { p, features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Misclassification rate of the plug-in Bayes rule under `theta`.
    pub fn error_rate(&self, theta: &MixtureParams) -> Result<f64> {
        if theta.dim() != self.p {
            return Err(Error::DimensionMismatch {
                what: "feature dimension",
                expected: self.p,
                found: theta.dim(),
            });
        }
        let wrong = self
            .features
            .chunks_exact(self.p)
            .zip(&self.labels)
            .filter(|(y, z)| theta.classify(y) != **z)
            .count();
        Ok(wrong as f64 / self.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluginError {
    pub error: f64,
    /// Error of the rule built from the true parameters on the same points.
    pub bayes_error: f64,
}

pub fn plugin_error(
    theta_hat: &MixtureParams,
    theta_true: &MixtureParams,
    n_test: usize,
    seed: u64,
) -> Result<PluginError> {
    if theta_hat.n_components() != theta_true.n_components() {
        return Err(Error::DimensionMismatch {
            what: "component count",
            expected: theta_true.n_components(),
            found: theta_hat.n_components(),
        });
    }
    if n_test == 0 {
        return Err(Error::InvalidConfig("n_test must be at least 1".into()));
    }
    let test = TestSet::draw(theta_true, n_test, seed);
    Ok(PluginError {
        error: test.error_rate(theta_hat)?,
        bayes_error: test.error_rate(theta_true)?,
    })
}

/// One estimator's result on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutcome {
    pub estimator: Estimator,
    /// `None` when the fit failed.
    pub error: Option<f64>,
    pub converged: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub gamma: f64,
    pub bayes_error: f64,
    pub outcomes: Vec<EstimatorOutcome>,
}

impl ReplicateRecord {
    pub fn error_of(&self, estimator: Estimator) -> Option<f64> {
        self.outcomes.iter().find(|o| o.estimator == estimator).and_then(|o| o.error)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub mean_error: f64,
    pub sd_error: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub n_not_converged: usize,
}

/// `estimator - COMPLETE` over replicates where both succeeded.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDifference {
    pub estimator: Estimator,
    pub mean: f64,
    /// Standard deviation of the bootstrap means.
    pub bootstrap_se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_pairs: usize,
}

impl PairedDifference {
    pub fn excludes_zero(&self) -> bool {
        self.ci_high < 0.0 || self.ci_low > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub summaries: Vec<EstimatorSummary>,
    pub differences: Vec<PairedDifference>,
    pub mean_gamma: f64,
    pub mean_bayes_error: f64,
    pub failure_fraction: f64,
    pub failures_flagged: bool,
    pub records: Vec<ReplicateRecord>,
}

impl ExperimentReport {
    pub fn summary(&self, estimator: Estimator) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.estimator == estimator)
    }

    pub fn difference(&self, estimator: Estimator) -> Option<&PairedDifference> {
        self.differences.iter().find(|d| d.estimator == estimator)
    }
}

fn fit_estimator(
    estimator: Estimator,
    data: &PartialDataset,
    family: MechanismFamily,
    opts: &FitOptions,
) -> Result<(MixtureParams, bool)> {
    match estimator {
        Estimator::Complete => Ok((em::supervised_mle(data, opts.homoscedastic, opts.ridge)?, true)),
        Estimator::PartialFull => em::fit_full(data, family, opts).map(|f| (f.theta_hat, f.converged)),
        Estimator::PartialIgnorable => em::fit_ignorable(data, opts).map(|f| (f.theta_hat, f.converged)),
    }
}

/// Runs one replicate. Every estimator sees the same rows and test points,
/// and each fit's random starts come from a stream keyed by the estimator.
pub fn run_replicate(config: &ScenarioConfig, replicate: usize) -> Result<ReplicateRecord> {
    let data = generate(config, replicate)?;
    let test_seed = rng::derive_seed(config.seed, &format!("replicate/{replicate}/test"));
    let test = TestSet::draw(&config.theta_true, config.n_test, test_seed);
    let mut estimators = config.estimators.clone();
    estimators.sort();
    let outcomes = estimators
        .iter()
        .map(|&estimator| {
            let opts = FitOptions {
                seed: rng::derive_seed(config.seed, &format!("replicate/{replicate}/fit/{estimator}")),
                ..config.fit.clone()
            };
            let fitted = fit_estimator(estimator, &data, config.mechanism.family(), &opts)
                .and_then(|(theta, converged)| Ok((test.error_rate(&theta)?, converged)));
            match fitted {
                Ok((error, converged)) => EstimatorOutcome {
                    estimator,
                    error: Some(error),
                    converged,
                    failure: None,
                },
                Err(e) => EstimatorOutcome {
                    estimator,
                    error: None,
                    converged: false,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(ReplicateRecord {
        replicate,
        gamma: data.missing_fraction(),
        bayes_error: test.error_rate(&config.theta_true)?,
        outcomes,
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Percentile bootstrap of the mean of `diffs`.
pub fn bootstrap_mean(diffs: &[f64], resamples: usize, seed: u64, label: &str) -> (f64, f64, f64) {
    if diffs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mut r = rng::stream(seed, label);
    let n = diffs.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diffs[r.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let (_, se) = mean_sd(&means);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (se, at(0.025), at(0.975))
}

/// Aggregates replicate records into a report.
pub fn summarize(config: &ScenarioConfig, records: Vec<ReplicateRecord>) -> ExperimentReport {
    let mut estimators = config.estimators.clone();
    estimators.sort();
    let summaries: Vec<EstimatorSummary> = estimators
        .iter()
        .map(|&estimator| {
            let outcomes: Vec<&EstimatorOutcome> = records
                .iter()
                .flat_map(|r| r.outcomes.iter().filter(move |o| o.estimator == estimator))
                .collect();
            let errors: Vec<f64> = outcomes.iter().filter_map(|o| o.error).collect();
            let (mean_error, sd_error) = mean_sd(&errors);
            EstimatorSummary {
                estimator,
                mean_error,
                sd_error,
                n_ok: errors.len(),
                n_failed: outcomes.len() - errors.len(),
                n_not_converged: outcomes.iter().filter(|o| o.error.is_some() && !o.converged).count(),
            }
        })
        .collect();
    let differences = if estimators.contains(&Estimator::Complete) {
        estimators
            .iter()
            .filter(|&&e| e != Estimator::Complete)
            .map(|&estimator| {
                let diffs: Vec<f64> = records
                    .iter()
                    .filter_map(|r| Some(r.error_of(estimator)? - r.error_of(Estimator::Complete)?))
                    .collect();
                let (mean, _) = mean_sd(&diffs);
                let (bootstrap_se, ci_low, ci_high) =
                    bootstrap_mean(&diffs, BOOTSTRAP_RESAMPLES, config.seed, &format!("bootstrap/{estimator}"));
                PairedDifference {
                    estimator,
                    mean,
                    bootstrap_se,
                    ci_low,
                    ci_high,
                    n_pairs: diffs.len(),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let total_fits: usize = records.iter().map(|r| r.outcomes.len()).sum();
    let failed: usize = summaries.iter().map(|s| s.n_failed).sum();
    let failure_fraction = if total_fits == 0 { 0.0 } else { failed as f64 / total_fits as f64 };
    let (mean_gamma, _) = mean_sd(&records.iter().map(|r| r.gamma).collect::<Vec<_>>());
    let (mean_bayes_error, _) = mean_sd(&records.iter().map(|r| r.bayes_error).collect::<Vec<_>>());
    ExperimentReport {
        summaries,
        differences,
        mean_gamma,
        mean_bayes_error,
        failure_fraction,
        failures_flagged: failure_fraction > FAILURE_FLAG_FRACTION,
        records,
    }
}

/// Runs every replicate (in parallel on the current rayon pool) and
/// aggregates. Results do not depend on scheduling.
pub fn run_experiment(config: &ScenarioConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let records = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(config, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(config, records))
}
