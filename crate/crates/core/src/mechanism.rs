//! Models for the missing-label indicator `M`.
//!
//! Every family is a logistic model `Pr(M = 1 | .) = sigmoid(xi . u)`:
//!
//! | family        | `xi`                              | `u`                        |
//! |---------------|-----------------------------------|----------------------------|
//! | `MCAR`        | `(xi_0)`                          | `(1)`                      |
//! | `MAR_ENTROPY` | `(xi_0, xi_1)`                    | `(1, e(y; theta))`         |
//! | `MNAR_CLASS`  | `(xi_10, xi_11, xi_20, xi_21)`    | `(1, b_y)`, per true class |
//!
//! `e(y; theta)` is the posterior entropy and `b_y` the two-class
//! discriminant, so MAR and MNAR evaluations always take the current mixture
//! parameters. Probabilities are clamped to `[1e-12, 1 - 1e-12]` before logs.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::data::Observation;
use crate::error::{Error, Result};
use crate::mixture::MixtureParams;

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MechanismFamily {
    Mcar,
    MarEntropy,
    MnarClass,
}

impl MechanismFamily {
    pub const ALL: [MechanismFamily; 3] = [Self::Mcar, Self::MarEntropy, Self::MnarClass];

    /// Length of `xi`.
    pub fn arity(self) -> usize {
        match self {
            Self::Mcar => 1,
            Self::MarEntropy => 2,
            Self::MnarClass => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mcar => "MCAR",
            Self::MarEntropy => "MAR_ENTROPY",
            Self::MnarClass => "MNAR_CLASS",
        }
    }
}

impl fmt::Display for MechanismFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MechanismFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown mechanism family `{s}`")))
    }
}

/// A mechanism family together with its parameter vector `xi`.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismSpec {
    family: MechanismFamily,
    xi: Vec<f64>,
}

impl MechanismSpec {
    pub fn new(family: MechanismFamily, xi: Vec<f64>) -> Result<Self> {
        if xi.len() != family.arity() {
            return Err(Error::DimensionMismatch {
                what: "mechanism parameters",
                expected: family.arity(),
                found: xi.len(),
            });
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("{family} parameters must be finite: {xi:?}")));
        }
        Ok(Self { family, xi })
    }

    pub fn mcar(xi0: f64) -> Result<Self> {
        Self::new(MechanismFamily::Mcar, vec![xi0])
    }

    /// The MCAR sub-model of `family` matching `missing_rate`: every
    /// intercept is `logit(missing_rate)` and every slope is zero.
    pub fn mcar_start(family: MechanismFamily, missing_rate: f64) -> Result<Self> {
        let intercept = logit(missing_rate.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP));
        let xi = match family {
            MechanismFamily::Mcar => vec![intercept],
            MechanismFamily::MarEntropy => vec![intercept, 0.0],
            MechanismFamily::MnarClass => vec![intercept, 0.0, intercept, 0.0],
        };
        Self::new(family, xi)
    }

    pub fn family(&self) -> MechanismFamily {
        self.family
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn with_xi(&self, xi: Vec<f64>) -> Result<Self> {
        Self::new(self.family, xi)
    }

    pub(crate) fn check_params(&self, params: &MixtureParams) -> Result<()> {
        if self.family == MechanismFamily::MnarClass {
            params.linear_discriminant()?;
        }
        Ok(())
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// The θ-dependent quantities a mechanism can act on at one point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MechanismFeatures {
    pub entropy: f64,
    pub discriminant: f64,
}

impl MechanismFeatures {
    /// Computes only what `family` needs; the other field stays zero.
    pub fn compute(y: &[f64], family: MechanismFamily, params: &MixtureParams) -> Result<Self> {
        if y.len() != params.dim() {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: params.dim(),
                found: y.len(),
            });
        }
        Ok(match family {
            MechanismFamily::Mcar => Self::default(),
            MechanismFamily::MarEntropy => Self {
                entropy: params.posterior(y).entropy,
                discriminant: 0.0,
            },
            MechanismFamily::MnarClass => Self {
                entropy: 0.0,
                discriminant: params.linear_discriminant()?.eval(y),
            },
        })
    }
}

/// Linear predictor for one class and where its coefficients sit in `xi`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Predictor {
    pub eta: f64,
    pub offset: usize,
    pub u: [f64; 2],
    pub width: usize,
}

pub(crate) fn predictor(
    family: MechanismFamily,
    xi: &[f64],
    features: &MechanismFeatures,
    class: usize,
) -> Predictor {
    let (offset, u, width) = match family {
        MechanismFamily::Mcar => (0, [1.0, 0.0], 1),
        MechanismFamily::MarEntropy => (0, [1.0, features.entropy], 2),
        MechanismFamily::MnarClass => (2 * class, [1.0, features.discriminant], 2),
    };
    let eta = (0..width).map(|i| xi[offset + i] * u[i]).sum();
    Predictor {
        eta,
        offset,
        u,
        width,
    }
}

/// Clamped log-probabilities of `M = 1` and `M = 0` for a linear predictor,
/// with their first and second derivatives in the predictor.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogProbs {
    pub q: f64,
    pub log_miss: f64,
    pub log_obs: f64,
    /// d log_miss / d eta
    pub d_miss: f64,
    /// d log_obs / d eta
    pub d_obs: f64,
    /// second derivative, shared by both
    pub curvature: f64,
}

pub(crate) fn log_probs(eta: f64) -> LogProbs {
    let q = sigmoid(eta);
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&q) {
        let qc = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        return LogProbs {
            q: qc,
            log_miss: qc.ln(),
            log_obs: (1.0 - qc).ln(),
            d_miss: 0.0,
            d_obs: 0.0,
            curvature: 0.0,
        };
    }
    LogProbs {
        q,
        log_miss: -softplus(-eta),
        log_obs: -softplus(eta),
        d_miss: 1.0 - q,
        d_obs: -q,
        curvature: -q * (1.0 - q),
    }
}

fn require_class(spec: &MechanismSpec, class: Option<usize>, params: &MixtureParams) -> Result<usize> {
    match (spec.family, class) {
        (MechanismFamily::MnarClass, None) => Err(Error::ContractViolation(
            "MNAR_CLASS missingness probability needs the true class".into(),
        )),
        (_, Some(c)) if c >= params.n_components() => Err(Error::InvalidData(format!(
            "class {c} outside 0..{}",
            params.n_components()
        ))),
        (_, c) => Ok(c.unwrap_or(0)),
    }
}

/// `Pr(M = 1 | y, class)` under `spec` and the current mixture parameters.
pub fn miss_prob(
    y: &[f64],
    class: Option<usize>,
    spec: &MechanismSpec,
    params: &MixtureParams,
) -> Result<f64> {
    spec.check_params(params)?;
    let class = require_class(spec, class, params)?;
    let features = MechanismFeatures::compute(y, spec.family, params)?;
    Ok(log_probs(predictor(spec.family, &spec.xi, &features, class).eta).q)
}

/// The row's contribution to the mechanism log-likelihood.
///
/// Labelled rows give `log(1 - Pr(M = 1 | .))`; unlabelled rows give
/// `log Pr(M = 1 | y)`, which is only class-free under MCAR and MAR. For an
/// unlabelled MNAR row use [`mechanism_loglik_per_class`].
pub fn mechanism_loglik(obs: &Observation<'_>, spec: &MechanismSpec, params: &MixtureParams) -> Result<f64> {
    spec.check_params(params)?;
    let features = MechanismFeatures::compute(obs.y, spec.family, params)?;
    match obs.label {
        Some(z) => {
            let z = require_class(spec, Some(z), params)?;
            Ok(log_probs(predictor(spec.family, &spec.xi, &features, z).eta).log_obs)
        }
        None if spec.family == MechanismFamily::MnarClass => Err(Error::ContractViolation(
            "scalar mechanism log-likelihood is undefined for an unlabelled MNAR_CLASS row".into(),
        )),
        None => Ok(log_probs(predictor(spec.family, &spec.xi, &features, 0).eta).log_miss),
    }
}

/// `log Pr(M = 1 | Z = i, y)` for every class `i`.
pub fn mechanism_loglik_per_class(y: &[f64], spec: &MechanismSpec, params: &MixtureParams) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    let features = MechanismFeatures::compute(y, spec.family, params)?;
    Ok((0..params.n_components())
        .map(|i| log_probs(predictor(spec.family, &spec.xi, &features, i).eta).log_miss)
        .collect())
}

fn check_weights(
    obs: &Observation<'_>,
    spec: &MechanismSpec,
    params: &MixtureParams,
    weights: Option<&[f64]>,
) -> Result<()> {
    let needs = spec.family == MechanismFamily::MnarClass && obs.is_missing();
    match (needs, weights) {
        (true, None) => Err(Error::ContractViolation(
            "an unlabelled MNAR_CLASS row needs class responsibilities".into(),
        )),
        (false, Some(_)) => Err(Error::ContractViolation(
            "responsibilities are only accepted for unlabelled MNAR_CLASS rows".into(),
        )),
        (true, Some(w)) if w.len() != params.n_components() => Err(Error::DimensionMismatch {
            what: "responsibilities",
            expected: params.n_components(),
            found: w.len(),
        }),
        _ => Ok(()),
    }
}

/// Gradient in `xi` of the row's mechanism log-likelihood; for unlabelled
/// MNAR rows, of its responsibility-weighted expectation over classes.
pub fn mechanism_grad_xi(
    obs: &Observation<'_>,
    spec: &MechanismSpec,
    params: &MixtureParams,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    check_weights(obs, spec, params, weights)?;
    let features = MechanismFeatures::compute(obs.y, spec.family, params)?;
    let mut grad = vec![0.0; spec.xi.len()];
    accumulate_row(spec, &features, obs.label, weights, Some(&mut grad), None);
    Ok(grad)
}

/// Hessian in `xi` matching [`mechanism_grad_xi`] (responsibilities held fixed).
pub fn mechanism_hessian_xi(
    obs: &Observation<'_>,
    spec: &MechanismSpec,
    params: &MixtureParams,
    weights: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    spec.check_params(params)?;
    check_weights(obs, spec, params, weights)?;
    let features = MechanismFeatures::compute(obs.y, spec.family, params)?;
    let k = spec.xi.len();
    let mut hess = DMatrix::zeros(k, k);
    accumulate_row(spec, &features, obs.label, weights, None, Some(&mut hess));
    Ok(hess)
}

/// Adds one row's gradient and/or Hessian contributions. `weights` are used
/// for unlabelled MNAR rows and ignored otherwise.
pub(crate) fn accumulate_row(
    spec: &MechanismSpec,
    features: &MechanismFeatures,
    label: Option<usize>,
    weights: Option<&[f64]>,
    mut grad: Option<&mut [f64]>,
    mut hess: Option<&mut DMatrix<f64>>,
) {
    let mut add = |pred: Predictor, slope: f64, curvature: f64, w: f64| {
        if let Some(g) = grad.as_deref_mut() {
            for i in 0..pred.width {
                g[pred.offset + i] += w * slope * pred.u[i];
            }
        }
        if let Some(h) = hess.as_deref_mut() {
            for i in 0..pred.width {
                for j in 0..pred.width {
                    h[(pred.offset + i, pred.offset + j)] += w * curvature * pred.u[i] * pred.u[j];
                }
            }
        }
    };
    match label {
        Some(z) => {
            let pred = predictor(spec.family, &spec.xi, features, z);
            let lp = log_probs(pred.eta);
            add(pred, lp.d_obs, lp.curvature, 1.0);
        }
        None if spec.family == MechanismFamily::MnarClass => {
            for (class, &w) in weights.unwrap_or(&[0.5, 0.5]).iter().enumerate() {
                let pred = predictor(spec.family, &spec.xi, features, class);
                let lp = log_probs(pred.eta);
                add(pred, lp.d_miss, lp.curvature, w);
            }
        }
        None => {
            let pred = predictor(spec.family, &spec.xi, features, 0);
            let lp = log_probs(pred.eta);
            add(pred, lp.d_miss, lp.curvature, 1.0);
        }
    }
}
