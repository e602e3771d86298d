//! Likelihood evaluation and EM fitting for partially labelled data.
//!
//! [`fit_ignorable`] maximises the observed-data log-likelihood that drops
//! the missingness model: labelled rows contribute `log pi_z f_z(y)` and
//! unlabelled rows `log sum_i pi_i f_i(y)`. [`fit_full`] adds the mechanism
//! and estimates `(theta, xi)` jointly with an ascent-checked generalised EM.

mod full;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::Exp1;

use crate::data::PartialDataset;
use crate::error::{Error, Result};
use crate::mechanism::{log_probs, predictor, MechanismFamily, MechanismFeatures, MechanismSpec};
use crate::mixture::{entropy_from_log_joint, log_sum_exp, MixtureParams};
use crate::rng;

pub use full::{fit_full, fit_full_from};

/// Components whose total responsibility falls below this abort the restart.
pub const MIN_COMPONENT_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// Start from the labelled-only MLE when every class has at least `p + 1`
    /// labelled rows; otherwise fall back to random responsibilities.
    LabelledMle,
    /// Unlabelled responsibilities drawn from a symmetric Dirichlet(1).
    RandomResponsibilities,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LABELLED_MLE" => Ok(Self::LabelledMle),
            "RANDOM_RESPONSIBILITIES" => Ok(Self::RandomResponsibilities),
            other => Err(Error::InvalidConfig(format!("unknown init strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop once `|L_t - L_{t-1}| < rel_tol * |L_{t-1}|`.
    pub rel_tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
    pub init_strategy: InitStrategy,
    /// Eigenvalue floor applied to every M-step covariance.
    pub ridge: f64,
    /// Pool a single covariance across components.
    pub homoscedastic: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            rel_tol: 1e-8,
            n_restarts: 5,
            seed: 0,
            init_strategy: InitStrategy::LabelledMle,
            ridge: 1e-6,
            homoscedastic: true,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("rel_tol must be positive".into()));
        }
        if self.n_restarts < 1 {
            return Err(Error::InvalidConfig("n_restarts must be at least 1".into()));
        }
        if !(self.ridge >= crate::mixture::EIGENVALUE_FLOOR) {
            return Err(Error::InvalidConfig("ridge must be at least 1e-10".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: MixtureParams,
    pub xi_hat: Option<MechanismSpec>,
    /// Objective value at every recorded iterate, the last one at `theta_hat`.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub restart_index: usize,
    pub n_iter: usize,
    /// Restarts that aborted (degenerate component or mechanism failure).
    pub failed_restarts: usize,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

pub(crate) fn check_compatible(data: &PartialDataset, params: &MixtureParams) -> Result<()> {
    if data.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            what: "feature dimension",
            expected: params.dim(),
            found: data.dim(),
        });
    }
    Ok(())
}

fn label_in_range(j: usize, z: usize, g: usize) -> Result<usize> {
    if z >= g {
        return Err(Error::InvalidData(format!("row {j}: observed label {z} outside 0..{g}")));
    }
    Ok(z)
}

/// Observed-data log-likelihood ignoring the missingness mechanism.
pub fn log_lik_ignorable(data: &PartialDataset, params: &MixtureParams) -> Result<f64> {
    check_compatible(data, params)?;
    let g = params.n_components();
    let mut lj = vec![0.0; g];
    let mut total = 0.0;
    for j in 0..data.len() {
        params.log_joint_into(data.row(j), &mut lj);
        total += match data.observed_label(j) {
            Some(z) => lj[label_in_range(j, z, g)?],
            None => log_sum_exp(&lj),
        };
    }
    Ok(total)
}

/// Log-likelihood including the missingness indicators.
pub fn log_lik_full(data: &PartialDataset, params: &MixtureParams, spec: &MechanismSpec) -> Result<f64> {
    check_compatible(data, params)?;
    spec.check_params(params)?;
    let g = params.n_components();
    let mut lj = vec![0.0; g];
    let mut a = vec![0.0; g];
    let mut total = 0.0;
    for j in 0..data.len() {
        let y = data.row(j);
        params.log_joint_into(y, &mut lj);
        let features = features_from_log_joint(spec.family(), params, y, &lj);
        total += match data.observed_label(j) {
            Some(z) => {
                let z = label_in_range(j, z, g)?;
                lj[z] + log_probs(predictor(spec.family(), spec.xi(), &features, z).eta).log_obs
            }
            None => {
                for k in 0..g {
                    a[k] = lj[k] + log_probs(predictor(spec.family(), spec.xi(), &features, k).eta).log_miss;
                }
                log_sum_exp(&a)
            }
        };
    }
    Ok(total)
}

pub(crate) fn features_from_log_joint(
    family: MechanismFamily,
    params: &MixtureParams,
    y: &[f64],
    log_joint: &[f64],
) -> MechanismFeatures {
    match family {
        MechanismFamily::Mcar => MechanismFeatures::default(),
        MechanismFamily::MarEntropy => MechanismFeatures {
            entropy: entropy_from_log_joint(log_joint),
            discriminant: 0.0,
        },
        MechanismFamily::MnarClass => MechanismFeatures {
            entropy: 0.0,
            discriminant: params.linear_discriminant().map(|d| d.eval(y)).unwrap_or(0.0),
        },
    }
}

/// Clamps covariance eigenvalues from below at `floor`; returns `cov`
/// untouched when it already satisfies the floor.
pub(crate) fn floor_eigenvalues(cov: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return cov;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&clamped) * v.transpose()
}

/// Weighted mixture M-step. `resp` is row-major `n x g`.
pub(crate) fn m_step(data: &PartialDataset, resp: &[f64], g: usize, homoscedastic: bool, ridge: f64) -> Result<MixtureParams> {
    let p = data.dim();
    let n = data.len();
    let mut mass = vec![0.0; g];
    let mut sums = vec![DVector::zeros(p); g];
    for j in 0..n {
        let y = data.row(j);
        for k in 0..g {
            let r = resp[j * g + k];
            if r != 0.0 {
                mass[k] += r;
                for a in 0..p {
                    sums[k][a] += r * y[a];
                }
            }
        }
    }
    for (k, &m) in mass.iter().enumerate() {
        if !(m >= MIN_COMPONENT_MASS) {
            return Err(Error::DegenerateComponent { component: k, total: m });
        }
    }
    let total: f64 = mass.iter().sum();
    let weights: Vec<f64> = mass.iter().map(|m| m / total).collect();
    let means: Vec<DVector<f64>> = sums.iter().zip(&mass).map(|(s, m)| s / *m).collect();
    let mut scatter = vec![DMatrix::zeros(p, p); g];
    let mut r_vec = vec![0.0; p];
    for j in 0..n {
        let y = data.row(j);
        for k in 0..g {
            let r = resp[j * g + k];
            if r == 0.0 {
                continue;
            }
            for a in 0..p {
                r_vec[a] = y[a] - means[k][a];
            }
            let s = &mut scatter[k];
            for a in 0..p {
                for b in 0..=a {
                    s[(a, b)] += r * r_vec[a] * r_vec[b];
                }
            }
        }
    }
    for s in scatter.iter_mut() {
        for a in 0..p {
            for b in 0..a {
                s[(b, a)] = s[(a, b)];
            }
        }
    }
    if homoscedastic {
        let pooled = scatter.iter().fold(DMatrix::zeros(p, p), |acc, s| acc + s) / total;
        MixtureParams::homoscedastic(weights, means, floor_eigenvalues(pooled, ridge))
    } else {
        let covs = scatter
            .into_iter()
            .zip(&mass)
            .map(|(s, m)| floor_eigenvalues(s / *m, ridge))
            .collect();
        MixtureParams::new(weights, means, covs)
    }
}

/// Closed-form MLE from the observed labels only.
pub fn labelled_mle(data: &PartialDataset, homoscedastic: bool, ridge: f64) -> Result<MixtureParams> {
    let g = data.n_classes();
    let mut resp = vec![0.0; data.len() * g];
    for j in 0..data.len() {
        if let Some(z) = data.observed_label(j) {
            resp[j * g + z] = 1.0;
        }
    }
    m_step(data, &resp, g, homoscedastic, ridge)
}

/// Closed-form MLE with every label revealed (the complete-data estimator).
pub fn supervised_mle(data: &PartialDataset, homoscedastic: bool, ridge: f64) -> Result<MixtureParams> {
    labelled_mle(&data.with_all_labels_revealed(), homoscedastic, ridge)
}

fn labelled_start_possible(data: &PartialDataset) -> bool {
    data.labelled_counts().iter().all(|&c| c > data.dim())
}

/// Initial parameters for restart `restart`.
pub(crate) fn initial_params(data: &PartialDataset, opts: &FitOptions, restart: usize) -> Result<MixtureParams> {
    if restart == 0 && opts.init_strategy == InitStrategy::LabelledMle && labelled_start_possible(data) {
        return labelled_mle(data, opts.homoscedastic, opts.ridge);
    }
    let g = data.n_classes();
    let mut r = rng::stream(opts.seed, &format!("restart/{restart}/init"));
    let mut resp = vec![0.0; data.len() * g];
    for j in 0..data.len() {
        let row = &mut resp[j * g..(j + 1) * g];
        match data.observed_label(j) {
            Some(z) => row[z] = 1.0,
            None => {
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = r.sample::<f64, _>(Exp1);
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
    }
    m_step(data, &resp, g, opts.homoscedastic, opts.ridge)
}

pub(crate) fn relative_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev.abs().max(f64::MIN_POSITIVE)
}

/// One restart's outcome before restart selection.
pub(crate) struct RunOutcome {
    pub theta: MixtureParams,
    pub xi: Option<MechanismSpec>,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Picks the best successful restart (ties go to the lowest index) and
/// canonicalises the component order when no label anchors it.
pub(crate) fn select_best(data: &PartialDataset, outcomes: Vec<Result<RunOutcome>>) -> Result<FitResult> {
    let failed_restarts = outcomes.iter().filter(|o| o.is_err()).count();
    let mut best: Option<(usize, RunOutcome)> = None;
    let mut first_error = None;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(o) => {
                let better = match &best {
                    None => true,
                    Some((_, b)) => o.trace.last() > b.trace.last(),
                };
                if better {
                    best = Some((i, o));
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let (restart_index, outcome) = match best {
        Some(b) => b,
        None => return Err(first_error.expect("at least one restart ran")),
    };
    let theta_hat = if data.labelled_counts().iter().all(|&c| c == 0) {
        outcome.theta.canonicalized()
    } else {
        outcome.theta
    };
    Ok(FitResult {
        theta_hat,
        xi_hat: outcome.xi,
        n_iter: outcome.trace.len(),
        loglik_trace: outcome.trace,
        converged: outcome.converged,
        restart_index,
        failed_restarts,
    })
}

fn check_data(data: &PartialDataset, opts: &FitOptions) -> Result<()> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidData("cannot fit an empty dataset".into()));
    }
    Ok(())
}

/// EM for the ignorable likelihood, best of `opts.n_restarts` starts.
pub fn fit_ignorable(data: &PartialDataset, opts: &FitOptions) -> Result<FitResult> {
    check_data(data, opts)?;
    let outcomes = (0..opts.n_restarts)
        .map(|r| initial_params(data, opts, r).and_then(|init| run_ignorable(data, init, opts)))
        .collect();
    select_best(data, outcomes)
}

/// EM for the ignorable likelihood from a given starting point (one run).
pub fn fit_ignorable_from(data: &PartialDataset, init: &MixtureParams, opts: &FitOptions) -> Result<FitResult> {
    check_data(data, opts)?;
    check_compatible(data, init)?;
    select_best(data, vec![run_ignorable(data, init.clone(), opts)])
}

/// Ignorable E-step; returns the log-likelihood at `params`.
fn e_step_ignorable(data: &PartialDataset, params: &MixtureParams, resp: &mut [f64]) -> f64 {
    let g = params.n_components();
    let mut lj = vec![0.0; g];
    let mut total = 0.0;
    for j in 0..data.len() {
        let row = &mut resp[j * g..(j + 1) * g];
        params.log_joint_into(data.row(j), &mut lj);
        match data.observed_label(j) {
            Some(z) => {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[z] = 1.0;
                total += lj[z];
            }
            None => {
                let lse = log_sum_exp(&lj);
                for k in 0..g {
                    row[k] = (lj[k] - lse).exp();
                }
                total += lse;
            }
        }
    }
    total
}

fn run_ignorable(data: &PartialDataset, init: MixtureParams, opts: &FitOptions) -> Result<RunOutcome> {
    let g = data.n_classes();
    if init.n_components() != g {
        return Err(Error::DimensionMismatch {
            what: "component count",
            expected: g,
            found: init.n_components(),
        });
    }
    let mut theta = init;
    let mut resp = vec![0.0; data.len() * g];
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for it in 0..opts.max_iter {
        let ll = e_step_ignorable(data, &theta, &mut resp);
        if !ll.is_finite() {
            return Err(Error::InvalidData(format!("non-finite log-likelihood at iteration {it}")));
        }
        let done = trace.last().is_some_and(|&prev| relative_change(prev, ll) < opts.rel_tol);
        trace.push(ll);
        if done {
            converged = true;
            break;
        }
        if it + 1 == opts.max_iter {
            break;
        }
        theta = m_step(data, &resp, g, opts.homoscedastic, opts.ridge)?;
    }
    Ok(RunOutcome {
        theta,
        xi: None,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PartialDataset {
        PartialDataset::new(
            1,
            2,
            vec![-2.0, -1.0, -1.5, 1.0, 2.0, 1.4, 0.1, -0.2],
            vec![0, 0, 0, 1, 1, 1, 1, 0],
            vec![false, false, false, false, false, false, true, true],
        )
        .unwrap()
    }

    #[test]
    fn single_row_identical_components() {
        let params = MixtureParams::univariate_two_class(0.5, 0.0, 0.0, 1.0).unwrap();
        let data = PartialDataset::new(1, 2, vec![0.0], vec![0], vec![true]).unwrap();
        let ll = log_lik_ignorable(&data, &params).unwrap();
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn mcar_full_likelihood_factorises() {
        let data = tiny();
        let params = MixtureParams::univariate_two_class(0.4, -1.0, 1.2, 0.8).unwrap();
        let xi0 = 0.3;
        let spec = MechanismSpec::mcar(xi0).unwrap();
        let full = log_lik_full(&data, &params, &spec).unwrap();
        let n1 = data.n_missing() as f64;
        let n0 = data.len() as f64 - n1;
        let q = crate::mechanism::sigmoid(xi0);
        let expected = log_lik_ignorable(&data, &params).unwrap() + n0 * (1.0 - q).ln() + n1 * q.ln();
        assert!((full - expected).abs() < 1e-10);
        let mnar = MechanismSpec::new(MechanismFamily::MnarClass, vec![xi0, 0.0, xi0, 0.0]).unwrap();
        assert!((log_lik_full(&data, &params, &mnar).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn degenerate_component_is_named() {
        let data = PartialDataset::new(1, 2, vec![0.0, 1.0], vec![0, 0], vec![false, false]).unwrap();
        let err = labelled_mle(&data, true, 1e-6).unwrap_err();
        assert_eq!(err, Error::DegenerateComponent { component: 1, total: 0.0 });
    }

    #[test]
    fn empty_data_is_rejected() {
        let data = PartialDataset::new(1, 2, vec![], vec![], vec![]).unwrap();
        assert!(matches!(fit_ignorable(&data, &FitOptions::default()), Err(Error::InvalidData(_))));
    }

    #[test]
    fn eigen_floor_only_touches_small_eigenvalues() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(floor_eigenvalues(cov.clone(), 1e-6), cov);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let floored = floor_eigenvalues(singular, 1e-3);
        let min = SymmetricEigen::new(floored).eigenvalues.min();
        assert!((min - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn invalid_options() {
        let opts = FitOptions { n_restarts: 0, ..FitOptions::default() };
        assert!(fit_ignorable(&tiny(), &opts).is_err());
        let opts = FitOptions { rel_tol: 0.0, ..FitOptions::default() };
        assert!(fit_ignorable(&tiny(), &opts).is_err());
    }
}
