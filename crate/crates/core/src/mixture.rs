//! Gaussian mixture primitives shared by every other module.
//!
//! All mixture computations run in log-space. Posterior class
//! probabilities are obtained with a log-sum-exp so that unlabelled rows far
//! from every component do not underflow.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Smallest admissible covariance eigenvalue.
pub const EIGENVALUE_FLOOR: f64 = 1e-10;

/// Tolerance on the sum of the mixing weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A posterior entry at or above `1 - DEGENERATE_TAU_TOL` makes the entropy zero.
pub const DEGENERATE_TAU_TOL: f64 = 1e-12;

/// `log(sum(exp(values)))` without overflow or underflow.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Symmetrises `cov` and checks its eigenvalue floor.
pub fn validate_covariance(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.nrows() != cov.ncols() {
        return Err(Error::DimensionMismatch {
            what: "covariance columns",
            expected: cov.nrows(),
            found: cov.ncols(),
        });
    }
    if cov.nrows() == 0 {
        return Err(Error::InvalidParams("covariance must be at least 1x1".into()));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("covariance has non-finite entries".into()));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let min_eigenvalue = SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(min_eigenvalue >= EIGENVALUE_FLOOR) {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue,
            floor: EIGENVALUE_FLOOR,
        });
    }
    Ok(sym)
}

/// Log-density of `N(mean, cov)` at `y`.
pub fn component_logpdf(y: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let cov = validate_covariance(cov)?;
    if mean.len() != cov.nrows() {
        return Err(Error::DimensionMismatch {
            what: "mean",
            expected: cov.nrows(),
            found: mean.len(),
        });
    }
    if y.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            what: "feature vector",
            expected: mean.len(),
            found: y.len(),
        });
    }
    let component = Component::new(DVector::from_column_slice(mean), cov)?;
    Ok(component.log_density(y))
}

/// One Gaussian component with its factorisation cached.
#[derive(Debug, Clone)]
pub(crate) struct Component {
    pub(crate) mean: DVector<f64>,
    pub(crate) cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    pub(crate) chol: DMatrix<f64>,
    pub(crate) precision: DMatrix<f64>,
    log_norm: f64,
}

impl Component {
    /// `cov` must already be validated.
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        let chol = nalgebra::Cholesky::new(cov.clone()).ok_or(Error::NotPositiveDefinite {
            min_eigenvalue: f64::NAN,
            floor: EIGENVALUE_FLOOR,
        })?;
        let l = chol.l();
        let inv = chol.inverse();
        let precision = (&inv + inv.transpose()) * 0.5;
        let log_det_half: f64 = (0..p).map(|i| l[(i, i)].ln()).sum();
        Ok(Self {
            mean,
            cov,
            chol: l,
            precision,
            log_norm: -0.5 * p as f64 * (2.0 * PI).ln() - log_det_half,
        })
    }

    #[inline]
    pub(crate) fn log_density(&self, y: &[f64]) -> f64 {
        let p = y.len();
        let mut quad = 0.0;
        for a in 0..p {
            let ra = y[a] - self.mean[a];
            let mut acc = 0.0;
            for b in 0..p {
                acc += self.precision[(a, b)] * (y[b] - self.mean[b]);
            }
            quad += ra * acc;
        }
        self.log_norm - 0.5 * quad
    }
}

/// Coefficients of the two-class log-posterior-odds `b(y) = intercept + slope . y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDiscriminant {
    pub intercept: f64,
    pub slope: DVector<f64>,
}

impl LinearDiscriminant {
    #[inline]
    pub fn eval(&self, y: &[f64]) -> f64 {
        self.intercept + self.slope.iter().zip(y).map(|(s, v)| s * v).sum::<f64>()
    }
}

/// The full parameter set of a `g`-component Gaussian mixture.
///
/// Values are validated on construction and immutable afterwards.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Component>,
    homoscedastic: bool,
    discriminant: Option<LinearDiscriminant>,
}

impl MixtureParams {
    /// Heteroscedastic mixture: one covariance per component.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if covariances.len() != means.len() {
            return Err(Error::DimensionMismatch {
                what: "covariance count",
                expected: means.len(),
                found: covariances.len(),
            });
        }
        let covs = covariances
            .iter()
            .map(validate_covariance)
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(weights, means, covs, false)
    }

    /// Homoscedastic mixture: every component shares `covariance`.
    pub fn homoscedastic(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariance: DMatrix<f64>,
    ) -> Result<Self> {
        let cov = validate_covariance(&covariance)?;
        let covs = vec![cov; means.len()];
        Self::assemble(weights, means, covs, true)
    }

    /// Two-class univariate mixture with a shared variance, a common test fixture.
    pub fn univariate_two_class(weight1: f64, mean1: f64, mean2: f64, variance: f64) -> Result<Self> {
        Self::homoscedastic(
            vec![weight1, 1.0 - weight1],
            vec![DVector::from_element(1, mean1), DVector::from_element(1, mean2)],
            DMatrix::from_element(1, 1, variance),
        )
    }

    fn assemble(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        homoscedastic: bool,
    ) -> Result<Self> {
        let g = weights.len();
        if g < 2 {
            return Err(Error::InvalidParams(format!("need at least 2 components, got {g}")));
        }
        if means.len() != g {
            return Err(Error::DimensionMismatch {
                what: "mean count",
                expected: g,
                found: means.len(),
            });
        }
        if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidParams(format!("weight {i} = {w} is not positive")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParams(format!("weights sum to {sum}, not 1")));
        }
        let p = means[0].len();
        if p == 0 {
            return Err(Error::InvalidParams("feature dimension must be at least 1".into()));
        }
        for (mean, cov) in means.iter().zip(&covs) {
            if mean.len() != p {
                return Err(Error::DimensionMismatch {
                    what: "mean",
                    expected: p,
                    found: mean.len(),
                });
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams("mean has non-finite entries".into()));
            }
            if cov.nrows() != p {
                return Err(Error::DimensionMismatch {
                    what: "covariance",
                    expected: p,
                    found: cov.nrows(),
                });
            }
        }
        let components = means
            .into_iter()
            .zip(covs)
            .map(|(m, c)| Component::new(m, c))
            .collect::<Result<Vec<_>>>()?;
        let discriminant = (g == 2 && homoscedastic).then(|| {
            let delta = &components[0].mean - &components[1].mean;
            let slope = &components[0].precision * delta;
            let midpoint = (&components[0].mean + &components[1].mean) * 0.5;
            LinearDiscriminant {
                intercept: (weights[0] / weights[1]).ln() - slope.dot(&midpoint),
                slope,
            }
        });
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            components,
            homoscedastic,
            discriminant,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.components[k].mean
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.components[k].cov
    }

    pub fn is_homoscedastic(&self) -> bool {
        self.homoscedastic
    }

    pub(crate) fn component(&self, k: usize) -> &Component {
        &self.components[k]
    }

    /// Fills `out[k] = log pi_k + log f_k(y)`.
    #[inline]
    pub fn log_joint_into(&self, y: &[f64], out: &mut [f64]) {
        for (k, c) in self.components.iter().enumerate() {
            out[k] = self.log_weights[k] + c.log_density(y);
        }
    }

    pub fn log_joint(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_components()];
        self.log_joint_into(y, &mut out);
        out
    }

    /// Log of the mixture density at `y`.
    pub fn log_density(&self, y: &[f64]) -> f64 {
        log_sum_exp(&self.log_joint(y))
    }

    pub fn posterior(&self, y: &[f64]) -> PosteriorRow {
        PosteriorRow::from_log_joint(&self.log_joint(y))
    }

    /// The two-class discriminant, available for `g = 2` homoscedastic mixtures.
    pub fn linear_discriminant(&self) -> Result<&LinearDiscriminant> {
        self.discriminant.as_ref().ok_or_else(|| {
            Error::Unsupported(format!(
                "discriminant needs g = 2 and a shared covariance (g = {}, homoscedastic = {})",
                self.n_components(),
                self.homoscedastic
            ))
        })
    }

    /// Bayes plug-in rule: index of the largest `log pi_k + log f_k(y)`.
    pub fn classify(&self, y: &[f64]) -> usize {
        if let Some(d) = &self.discriminant {
            return if d.eval(y) >= 0.0 { 0 } else { 1 };
        }
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for (k, c) in self.components.iter().enumerate() {
            let v = self.log_weights[k] + c.log_density(y);
            if v > best_value {
                best = k;
                best_value = v;
            }
        }
        best
    }

    /// Draws `(class, y)` from the mixture; `y` is written into `out`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut class = self.n_components() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                class = k;
                break;
            }
        }
        self.draw_from(class, rng, out);
        class
    }

    /// Draws `y` from component `class` into `out`.
    pub fn draw_from<R: Rng + ?Sized>(&self, class: usize, rng: &mut R, out: &mut [f64]) {
        let c = &self.components[class];
        let p = self.dim();
        let mut eps = [0.0f64; 16];
        let mut heap;
        let eps: &mut [f64] = if p <= eps.len() {
            &mut eps[..p]
        } else {
            heap = vec![0.0; p];
            &mut heap
        };
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        for a in 0..p {
            let mut v = c.mean[a];
            for b in 0..=a {
                v += c.chol[(a, b)] * eps[b];
            }
            out[a] = v;
        }
    }

    /// Component order that sorts by first mean coordinate, ties broken by
    /// weight descending.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_components()).collect();
        order.sort_by(|&a, &b| {
            self.components[a].mean[0]
                .total_cmp(&self.components[b].mean[0])
                .then(self.weights[b].total_cmp(&self.weights[a]))
        });
        order
    }

    /// New parameters whose component `k` is this one's component `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.n_components() {
            return Err(Error::DimensionMismatch {
                what: "permutation",
                expected: self.n_components(),
                found: order.len(),
            });
        }
        let weights = order.iter().map(|&k| self.weights[k]).collect();
        let means = order.iter().map(|&k| self.components[k].mean.clone()).collect();
        if self.homoscedastic {
            Self::homoscedastic(weights, means, self.components[0].cov.clone())
        } else {
            let covs = order.iter().map(|&k| self.components[k].cov.clone()).collect();
            Self::new(weights, means, covs)
        }
    }

    pub fn canonicalized(&self) -> Self {
        let order = self.canonical_order();
        if order.iter().enumerate().all(|(i, &k)| i == k) {
            return self.clone();
        }
        self.permuted(&order).expect("a permutation of valid parameters is valid")
    }

    /// Largest absolute difference over weights, means and covariances.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut d: f64 = 0.0;
        for k in 0..self.n_components().min(other.n_components()) {
            d = d.max((self.weights[k] - other.weights[k]).abs());
            d = d.max((&self.components[k].mean - &other.components[k].mean).amax());
            d = d.max((&self.components[k].cov - &other.components[k].cov).amax());
        }
        d
    }
}

/// Posterior class probabilities at one point, with their entropy in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorRow {
    pub tau: Vec<f64>,
    pub entropy: f64,
}

impl PosteriorRow {
    /// Normalises `log pi_k + log f_k(y)` values.
    pub fn from_log_joint(log_joint: &[f64]) -> Self {
        let lse = log_sum_exp(log_joint);
        let mut tau: Vec<f64> = log_joint.iter().map(|l| (l - lse).exp()).collect();
        let total: f64 = tau.iter().sum();
        tau.iter_mut().for_each(|t| *t /= total);
        Self {
            tau,
            entropy: entropy_from_log_joint(log_joint),
        }
    }
}

/// Posterior entropy from `log pi_k + log f_k(y)` values, without allocating.
/// Zero once one class holds all but `1e-12` of the mass.
pub(crate) fn entropy_from_log_joint(log_joint: &[f64]) -> f64 {
    let lse = log_sum_exp(log_joint);
    let total: f64 = log_joint.iter().map(|l| (l - lse).exp()).sum();
    let mut e = 0.0;
    for l in log_joint {
        let lt = l - lse;
        let t = lt.exp() / total;
        if t >= 1.0 - DEGENERATE_TAU_TOL {
            return 0.0;
        }
        if t > 0.0 {
            e -= t * lt;
        }
    }
    e.clamp(0.0, (log_joint.len() as f64).ln())
}

/// Posterior class probabilities of `y` under `params`.
pub fn posterior_tau(y: &[f64], params: &MixtureParams) -> Result<PosteriorRow> {
    check_point(y, params)?;
    Ok(params.posterior(y))
}

/// Shannon entropy `-sum tau log tau` in nats, with `0 log 0 = 0`.
pub fn entropy(tau: &[f64]) -> Result<f64> {
    if let Some((i, t)) = tau.iter().enumerate().find(|(_, t)| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::InvalidProbability(format!("entry {i} = {t} is negative or non-finite")));
    }
    let sum: f64 = tau.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidProbability(format!("entries sum to {sum}, not 1")));
    }
    Ok(tau.iter().filter(|t| **t > 0.0).map(|t| -t * t.ln()).sum())
}

/// Two-class log-posterior-odds `log(tau_1 / tau_2)`.
pub fn discriminant(y: &[f64], params: &MixtureParams) -> Result<f64> {
    let d = params.linear_discriminant()?;
    check_point(y, params)?;
    Ok(d.eval(y))
}

fn check_point(y: &[f64], params: &MixtureParams) -> Result<()> {
    if y.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature vector",
            expected: params.dim(),
            found: y.len(),
        });
    }
    Ok(())
}
