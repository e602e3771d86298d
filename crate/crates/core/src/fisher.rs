//! Scores and Monte-Carlo Fisher-information estimates in free coordinates.
//!
//! Four information matrices are estimated from one stream of draws
//! `(y, z, m)` from the joint model (mixture plus missingness mechanism):
//!
//! * `CC`: complete-data scores of `(y, z)`;
//! * `CC_CLR`: scores of `z` given `y` (the logistic-regression part);
//! * `UC`: scores of the marginal density of `y`;
//! * `PC_FULL`: full-likelihood scores of the partially labelled row, which
//!   include the missingness indicator.
//!
//! `PC_MISS` is the remainder `PC_FULL - [(1 - gamma) CC + gamma UC]`, with
//! `gamma` the empirical missing fraction of the same stream. Mechanism
//! parameters are held fixed and are not information coordinates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::coords::{log_joint_gradients, FreeCoordinates, LogJointGradients};
use crate::error::{Error, Result};
use crate::mechanism::{log_probs, predictor, MechanismFamily, MechanismFeatures, MechanismSpec};
use crate::mixture::{log_sum_exp, MixtureParams, DEGENERATE_TAU_TOL};
use crate::rng;

/// Smallest accepted Monte-Carlo sample size.
pub const MIN_MC_SAMPLES: usize = 1000;

const CHUNK: usize = 2048;

/// Which log-likelihood a score differentiates.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// `log pi_z f_z(y)`; needs the class.
    Complete,
    /// `log f(y)`.
    Marginal,
    /// `log tau_z(y)`; needs the class.
    ClassGivenFeatures,
    /// Partially labelled row including the mechanism; the class is used only
    /// when the row is labelled.
    Full(&'a MechanismSpec),
}

/// One row as seen by a score: features, class and missingness indicator.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRow<'a> {
    pub y: &'a [f64],
    pub class: Option<usize>,
    pub missing: bool,
}

/// Gradient of the row log-likelihood selected by `conditioning` with
/// respect to the free coordinates of `params`.
pub fn score_theta(row: &ScoreRow<'_>, params: &MixtureParams, conditioning: Conditioning<'_>) -> Result<DVector<f64>> {
    if row.y.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature vector",
            expected: params.dim(),
            found: row.y.len(),
        });
    }
    let coords = FreeCoordinates::of(params);
    let lg = log_joint_gradients(&coords, params, row.y);
    let class = |needed: &'static str| -> Result<usize> {
        match row.class {
            Some(c) if c < params.n_components() => Ok(c),
            Some(c) => Err(Error::InvalidData(format!("class {c} out of range"))),
            None => Err(Error::ContractViolation(format!("{needed} score needs the class"))),
        }
    };
    let score = match conditioning {
        Conditioning::Complete => lg.grads[class("complete-data")?].clone(),
        Conditioning::Marginal => marginal_score(&lg),
        Conditioning::ClassGivenFeatures => {
            let z = class("conditional")?;
            &lg.grads[z] - marginal_score(&lg)
        }
        Conditioning::Full(spec) => {
            spec.check_params(params)?;
            let label = if row.missing { None } else { Some(class("labelled full-likelihood")?) };
            full_row(&lg, params, spec, row.y, label).1
        }
    };
    if let Some(coordinate) = score.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteScore { coordinate });
    }
    Ok(score)
}

fn posterior_weights(log_joint: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_joint);
    log_joint.iter().map(|l| (l - lse).exp()).collect()
}

fn marginal_score(lg: &LogJointGradients) -> DVector<f64> {
    let tau = posterior_weights(&lg.log_joint);
    let mut out = DVector::zeros(lg.grads[0].len());
    for (t, grad) in tau.iter().zip(&lg.grads) {
        out.axpy(*t, grad, 1.0);
    }
    out
}

/// Gradient of the mechanism predictor for `class` in free coordinates.
fn predictor_gradient(
    lg: &LogJointGradients,
    spec: &MechanismSpec,
    class: usize,
) -> Option<DVector<f64>> {
    let xi = spec.xi();
    match spec.family() {
        MechanismFamily::Mcar => None,
        MechanismFamily::MarEntropy => {
            let lse = log_sum_exp(&lg.log_joint);
            let log_tau: Vec<f64> = lg.log_joint.iter().map(|l| l - lse).collect();
            if log_tau.iter().any(|lt| lt.exp() >= 1.0 - DEGENERATE_TAU_TOL) {
                // entropy is pinned at zero there
                return Some(DVector::zeros(lg.grads[0].len()));
            }
            let entropy: f64 = log_tau.iter().map(|lt| -lt.exp() * lt).sum();
            let mut out = DVector::zeros(lg.grads[0].len());
            for (lt, grad) in log_tau.iter().zip(&lg.grads) {
                let tau = lt.exp();
                if tau > 0.0 {
                    out.axpy(-tau * (lt + entropy) * xi[1], grad, 1.0);
                }
            }
            Some(out)
        }
        MechanismFamily::MnarClass => Some((&lg.grads[0] - &lg.grads[1]) * xi[2 * class + 1]),
    }
}

/// Value and free-coordinate gradient of a row's full log-likelihood
/// (mixture plus mechanism). `label` is `None` for an unlabelled row.
pub(crate) fn full_row(
    lg: &LogJointGradients,
    params: &MixtureParams,
    spec: &MechanismSpec,
    y: &[f64],
    label: Option<usize>,
) -> (f64, DVector<f64>) {
    let features = match spec.family() {
        MechanismFamily::Mcar => MechanismFeatures::default(),
        MechanismFamily::MarEntropy => MechanismFeatures {
            entropy: crate::mixture::entropy_from_log_joint(&lg.log_joint),
            discriminant: 0.0,
        },
        MechanismFamily::MnarClass => MechanismFeatures {
            entropy: 0.0,
            discriminant: params
                .linear_discriminant()
                .expect("checked by caller")
                .eval(y),
        },
    };
    match label {
        Some(z) => {
            let lp = log_probs(predictor(spec.family(), spec.xi(), &features, z).eta);
            let mut grad = lg.grads[z].clone();
            if let Some(dp) = predictor_gradient(lg, spec, z) {
                grad.axpy(lp.d_obs, &dp, 1.0);
            }
            (lg.log_joint[z] + lp.log_obs, grad)
        }
        None => {
            let g = lg.log_joint.len();
            let lps: Vec<_> = (0..g)
                .map(|k| log_probs(predictor(spec.family(), spec.xi(), &features, k).eta))
                .collect();
            let a: Vec<f64> = (0..g).map(|k| lg.log_joint[k] + lps[k].log_miss).collect();
            let value = log_sum_exp(&a);
            let mut grad = DVector::zeros(lg.grads[0].len());
            for k in 0..g {
                let w = (a[k] - value).exp();
                grad.axpy(w, &lg.grads[k], 1.0);
                if let Some(dp) = predictor_gradient(lg, spec, k) {
                    grad.axpy(w * lps[k].d_miss, &dp, 1.0);
                }
            }
            (value, grad)
        }
    }
}

/// Scores of one Monte-Carlo draw under every conditioning.
#[derive(Debug, Clone)]
pub struct ScoreSample {
    pub complete: DVector<f64>,
    pub marginal: DVector<f64>,
    pub conditional: DVector<f64>,
    pub full: Option<DVector<f64>>,
    pub missing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InfoKind {
    Cc,
    CcClr,
    Uc,
    PcFull,
    PcMiss,
}

impl InfoKind {
    pub const ALL: [InfoKind; 5] = [Self::Cc, Self::CcClr, Self::Uc, Self::PcFull, Self::PcMiss];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cc => "CC",
            Self::CcClr => "CC_CLR",
            Self::Uc => "UC",
            Self::PcFull => "PC_FULL",
            Self::PcMiss => "PC_MISS",
        }
    }

    fn needs_mechanism(self) -> bool {
        matches!(self, Self::PcFull | Self::PcMiss)
    }
}

/// A Monte-Carlo information estimate with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct InfoEstimate {
    pub kind: InfoKind,
    pub matrix: DMatrix<f64>,
    pub mc_se: DMatrix<f64>,
    pub gamma: f64,
    pub n_mc: usize,
}

/// All five information components from one Monte-Carlo stream.
#[derive(Debug, Clone)]
pub struct InfoDecomposition {
    pub coords: FreeCoordinates,
    pub i_cc: InfoEstimate,
    pub i_uc: InfoEstimate,
    pub i_cc_clr: InfoEstimate,
    pub i_pc_full: InfoEstimate,
    pub i_pc_miss: InfoEstimate,
    pub gamma: f64,
    pub n_mc: usize,
}

impl InfoDecomposition {
    pub fn get(&self, kind: InfoKind) -> &InfoEstimate {
        match kind {
            InfoKind::Cc => &self.i_cc,
            InfoKind::CcClr => &self.i_cc_clr,
            InfoKind::Uc => &self.i_uc,
            InfoKind::PcFull => &self.i_pc_full,
            InfoKind::PcMiss => &self.i_pc_miss,
        }
    }
}

/// Draws `n_mc` rows from the joint model and returns their scores in
/// stream order. The stream is split into fixed-size chunks with their own
/// seeds, so the result does not depend on the number of worker threads.
pub fn sample_scores(
    params: &MixtureParams,
    spec: Option<&MechanismSpec>,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<ScoreSample>> {
    if n_mc < MIN_MC_SAMPLES {
        return Err(Error::TooFewSamples {
            n_mc,
            min: MIN_MC_SAMPLES,
        });
    }
    if let Some(spec) = spec {
        spec.check_params(params)?;
    }
    let coords = FreeCoordinates::of(params);
    let n_chunks = n_mc.div_ceil(CHUNK);
    let chunks: Vec<Vec<ScoreSample>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, &format!("info/chunk/{c}"));
            let len = CHUNK.min(n_mc - c * CHUNK);
            let mut y = vec![0.0; params.dim()];
            (0..len)
                .map(|_| {
                    let z = params.draw(&mut r, &mut y);
                    let lg = log_joint_gradients(&coords, params, &y);
                    let marginal = marginal_score(&lg);
                    let complete = lg.grads[z].clone();
                    let conditional = &complete - &marginal;
                    let (full, missing) = match spec {
                        Some(spec) => {
                            let (value, _) = full_row(&lg, params, spec, &y, Some(z));
                            let log_obs = value - lg.log_joint[z];
                            let missing = r.random::<f64>() >= log_obs.exp();
                            let label = (!missing).then_some(z);
                            (Some(full_row(&lg, params, spec, &y, label).1), missing)
                        }
                        None => (None, false),
                    };
                    ScoreSample {
                        complete,
                        marginal,
                        conditional,
                        full,
                        missing,
                    }
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Entry-wise mean and standard error of a per-sample symmetric matrix.
fn matrix_mean_se(n: usize, d: usize, entry: impl Fn(usize, usize, usize) -> f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut mean = DMatrix::zeros(d, d);
    let mut se = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let m = (0..n).map(|j| entry(j, a, b)).sum::<f64>() / n as f64;
            let var = (0..n).map(|j| (entry(j, a, b) - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let s = (var / n as f64).sqrt();
            mean[(a, b)] = m;
            mean[(b, a)] = m;
            se[(a, b)] = s;
            se[(b, a)] = s;
        }
    }
    (mean, se)
}

fn outer(v: &DVector<f64>, a: usize, b: usize) -> f64 {
    v[a] * v[b]
}

fn empirical_gamma(samples: &[ScoreSample]) -> f64 {
    samples.iter().filter(|s| s.missing).count() as f64 / samples.len() as f64
}

/// Per-sample contribution to `kind`, given the stream's missing fraction.
fn contribution(kind: InfoKind, s: &ScoreSample, gamma: f64, a: usize, b: usize) -> f64 {
    match kind {
        InfoKind::Cc => outer(&s.complete, a, b),
        InfoKind::CcClr => outer(&s.conditional, a, b),
        InfoKind::Uc => outer(&s.marginal, a, b),
        InfoKind::PcFull => outer(s.full.as_ref().expect("mechanism present"), a, b),
        InfoKind::PcMiss => {
            outer(s.full.as_ref().expect("mechanism present"), a, b)
                - (1.0 - gamma) * outer(&s.complete, a, b)
                - gamma * outer(&s.marginal, a, b)
        }
    }
}

fn estimate_from_samples(kind: InfoKind, samples: &[ScoreSample], d: usize) -> InfoEstimate {
    let gamma = empirical_gamma(samples);
    let (matrix, mc_se) = matrix_mean_se(samples.len(), d, |j, a, b| contribution(kind, &samples[j], gamma, a, b));
    InfoEstimate {
        kind,
        matrix,
        mc_se,
        gamma,
        n_mc: samples.len(),
    }
}

/// Monte-Carlo estimate of one information component.
pub fn estimate_info(
    kind: InfoKind,
    params: &MixtureParams,
    spec: Option<&MechanismSpec>,
    n_mc: usize,
    seed: u64,
) -> Result<InfoEstimate> {
    if kind.needs_mechanism() && spec.is_none() {
        return Err(Error::MissingMechanism(kind.as_str()));
    }
    let samples = sample_scores(params, spec, n_mc, seed)?;
    Ok(estimate_from_samples(kind, &samples, FreeCoordinates::of(params).dim()))
}

fn decomposition_from_samples(samples: &[ScoreSample], coords: FreeCoordinates) -> InfoDecomposition {
    let d = coords.dim();
    let est = |kind| estimate_from_samples(kind, samples, d);
    InfoDecomposition {
        coords,
        i_cc: est(InfoKind::Cc),
        i_uc: est(InfoKind::Uc),
        i_cc_clr: est(InfoKind::CcClr),
        i_pc_full: est(InfoKind::PcFull),
        i_pc_miss: est(InfoKind::PcMiss),
        gamma: empirical_gamma(samples),
        n_mc: samples.len(),
    }
}

/// All five components from a single stream.
pub fn decompose(params: &MixtureParams, spec: &MechanismSpec, n_mc: usize, seed: u64) -> Result<InfoDecomposition> {
    let samples = sample_scores(params, Some(spec), n_mc, seed)?;
    Ok(decomposition_from_samples(&samples, FreeCoordinates::of(params)))
}

/// Entry-wise residual matrix with standard errors and z-scores.
#[derive(Debug, Clone)]
pub struct Residual {
    pub value: DMatrix<f64>,
    pub mc_se: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub max_abs_z: f64,
}

impl Residual {
    fn new(value: DMatrix<f64>, mc_se: DMatrix<f64>) -> Self {
        let z = value.zip_map(&mc_se, |v, s| if v == 0.0 { 0.0 } else { v / s });
        let max_abs_z = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            value,
            mc_se,
            z,
            max_abs_z,
        }
    }

    /// Every entry within `k` standard errors of zero.
    pub fn within(&self, k: f64) -> bool {
        self.value
            .iter()
            .zip(self.mc_se.iter())
            .all(|(v, s)| v.abs() <= k * s)
    }
}

/// Smallest eigenvalue of an estimated matrix with the Monte-Carlo standard
/// error of the quadratic form along its eigenvector.
#[derive(Debug, Clone)]
pub struct EigenCheck {
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    pub mc_se: f64,
}

impl EigenCheck {
    /// `min_eigenvalue - k * mc_se > 0`.
    pub fn positive_at(&self, k: f64) -> bool {
        self.min_eigenvalue - k * self.mc_se > 0.0
    }
}

fn eigen_check(mean: &DMatrix<f64>, n: usize, quad: impl Fn(usize, &DVector<f64>) -> f64) -> EigenCheck {
    let eig = SymmetricEigen::new(mean.clone());
    let (idx, min) = eig
        .eigenvalues
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty matrix");
    let v: DVector<f64> = eig.eigenvectors.column(idx).into_owned();
    let values: Vec<f64> = (0..n).map(|j| quad(j, &v)).collect();
    let m = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    EigenCheck {
        eigenvalues,
        min_eigenvalue: min,
        mc_se: (var / n as f64).sqrt(),
    }
}

/// Rows are the gradients of the discriminant coefficients
/// `(intercept, slope_1..slope_p)` in free coordinates.
pub fn discriminant_jacobian(params: &MixtureParams) -> Result<DMatrix<f64>> {
    params.linear_discriminant()?;
    let coords = FreeCoordinates::of(params);
    let p = params.dim();
    let grad_b = |y: &[f64]| {
        let lg = log_joint_gradients(&coords, params, y);
        &lg.grads[0] - &lg.grads[1]
    };
    let origin = vec![0.0; p];
    let at_origin = grad_b(&origin);
    let mut jac = DMatrix::zeros(p + 1, coords.dim());
    jac.row_mut(0).copy_from(&at_origin.transpose());
    for a in 0..p {
        let mut e = origin.clone();
        e[a] = 1.0;
        jac.row_mut(a + 1).copy_from(&(grad_b(&e) - &at_origin).transpose());
    }
    Ok(jac)
}

/// `PC_MISS` restricted to the discriminant coefficients.
#[derive(Debug, Clone)]
pub struct DiscriminantProjection {
    pub matrix: DMatrix<f64>,
    pub eigen: EigenCheck,
}

#[derive(Debug, Clone)]
pub struct DecompositionReport {
    pub decomposition: InfoDecomposition,
    /// `PC_FULL - [CC - gamma CC_CLR + PC_MISS]`.
    pub residual: Residual,
    /// `UC - (CC - CC_CLR)`.
    pub uc_identity: Residual,
    /// `CC - CC_CLR`, which should be positive semidefinite.
    pub cc_minus_clr_eigenvalues: Vec<f64>,
    /// Smallest eigenvalue of `PC_MISS` over all free coordinates.
    pub miss_eigen: EigenCheck,
    /// `PC_MISS` in discriminant coordinates (two-class homoscedastic models).
    pub miss_discriminant: Option<DiscriminantProjection>,
}

/// Checks the three-term decomposition on one Monte-Carlo stream.
pub fn check_decomposition(
    params: &MixtureParams,
    spec: &MechanismSpec,
    n_mc: usize,
    seed: u64,
) -> Result<DecompositionReport> {
    let samples = sample_scores(params, Some(spec), n_mc, seed)?;
    let coords = FreeCoordinates::of(params);
    let d = coords.dim();
    let n = samples.len();
    let decomposition = decomposition_from_samples(&samples, coords);
    let gamma = decomposition.gamma;

    let (value, se) = matrix_mean_se(n, d, |j, a, b| {
        let s = &samples[j];
        let miss = contribution(InfoKind::PcMiss, s, gamma, a, b);
        contribution(InfoKind::PcFull, s, gamma, a, b)
            - (outer(&s.complete, a, b) - gamma * outer(&s.conditional, a, b) + miss)
    });
    let residual = Residual::new(value, se);

    let (value, se) = matrix_mean_se(n, d, |j, a, b| {
        let s = &samples[j];
        outer(&s.marginal, a, b) - (outer(&s.complete, a, b) - outer(&s.conditional, a, b))
    });
    let uc_identity = Residual::new(value, se);

    let cc_minus_clr = &decomposition.i_cc.matrix - &decomposition.i_cc_clr.matrix;
    let mut cc_minus_clr_eigenvalues: Vec<f64> = SymmetricEigen::new(cc_minus_clr).eigenvalues.iter().copied().collect();
    cc_minus_clr_eigenvalues.sort_by(f64::total_cmp);

    let miss_quad = |j: usize, v: &DVector<f64>| {
        let s = &samples[j];
        let full = s.full.as_ref().expect("mechanism present");
        full.dot(v).powi(2) - (1.0 - gamma) * s.complete.dot(v).powi(2) - gamma * s.marginal.dot(v).powi(2)
    };
    let miss_eigen = eigen_check(&decomposition.i_pc_miss.matrix, n, miss_quad);

    let miss_discriminant = match discriminant_jacobian(params) {
        Ok(jac) => {
            let gram = &jac * jac.transpose();
            let gram_inv = gram
                .try_inverse()
                .ok_or_else(|| Error::InvalidParams("singular discriminant Jacobian".into()))?;
            // projector onto discriminant coordinates: P X P^T recovers M when X = J^T M J
            let proj = gram_inv * &jac;
            let matrix = &proj * &decomposition.i_pc_miss.matrix * proj.transpose();
            let matrix = (&matrix + matrix.transpose()) * 0.5;
            let eigen = eigen_check(&matrix, n, |j, v| miss_quad(j, &(proj.transpose() * v)));
            Some(DiscriminantProjection { matrix, eigen })
        }
        Err(_) => None,
    };

    Ok(DecompositionReport {
        decomposition,
        residual,
        uc_identity,
        cc_minus_clr_eigenvalues,
        miss_eigen,
        miss_discriminant,
    })
}
