//! Joint estimation of mixture and mechanism parameters.
//!
//! One iteration of the generalised EM runs three ascent-checked updates on
//! the full log-likelihood:
//!
//! 1. an EM update of `theta` with mechanism-weighted responsibilities,
//!    damped toward the current iterate if it lowers the objective;
//! 2. for MAR and MNAR mechanisms, a BHHH step in free coordinates, which
//!    accounts for the mechanism's dependence on `theta` through the entropy
//!    or the discriminant;
//! 3. Newton iterations on `xi` with `theta` held fixed.
//!
//! Every update is accepted only when the objective does not decrease.

use nalgebra::{DMatrix, DVector};

use super::{
    check_compatible, features_from_log_joint, initial_params, m_step, relative_change, select_best, FitOptions,
    FitResult, RunOutcome,
};
use crate::coords::{log_joint_gradients, FreeCoordinates};
use crate::data::PartialDataset;
use crate::error::{Error, Result};
use crate::fisher::full_row;
use crate::mechanism::{log_probs, predictor, MechanismFamily, MechanismFeatures, MechanismSpec, Predictor};
use crate::mixture::{log_sum_exp, MixtureParams};

const EM_DAMPING_HALVINGS: usize = 4;
const MAX_HALVINGS: usize = 30;
const MAX_NEWTON_ITER: usize = 100;
const BHHH_HALVINGS: usize = 12;

/// Joint fit of `theta` and a mechanism of the given family, best of
/// `opts.n_restarts` starts. Each restart begins `xi` at the MCAR sub-model.
pub fn fit_full(data: &PartialDataset, family: MechanismFamily, opts: &FitOptions) -> Result<FitResult> {
    check_full(data, family, opts)?;
    let outcomes = (0..opts.n_restarts)
        .map(|r| {
            let init = initial_params(data, opts, r)?;
            let spec = MechanismSpec::mcar_start(family, data.missing_fraction())?;
            run_full(data, init, spec, opts)
        })
        .collect();
    select_best(data, outcomes)
}

/// Joint fit from a given `(theta, xi)` (one run).
pub fn fit_full_from(
    data: &PartialDataset,
    init: &MixtureParams,
    spec: &MechanismSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_full(data, spec.family(), opts)?;
    check_compatible(data, init)?;
    spec.check_params(init)?;
    select_best(data, vec![run_full(data, init.clone(), spec.clone(), opts)])
}

fn check_full(data: &PartialDataset, family: MechanismFamily, opts: &FitOptions) -> Result<()> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidData("cannot fit an empty dataset".into()));
    }
    if family == MechanismFamily::MnarClass && (data.n_classes() != 2 || !opts.homoscedastic) {
        return Err(Error::Unsupported(
            "MNAR_CLASS needs two classes and a homoscedastic model".into(),
        ));
    }
    Ok(())
}

/// Per-row quantities that do not depend on `xi`.
struct RowCache {
    g: usize,
    log_joint: Vec<f64>,
    features: Vec<MechanismFeatures>,
}

impl RowCache {
    fn new(data: &PartialDataset, params: &MixtureParams, family: MechanismFamily) -> Self {
        let g = params.n_components();
        let mut log_joint = vec![0.0; data.len() * g];
        let mut features = Vec::with_capacity(data.len());
        for j in 0..data.len() {
            let y = data.row(j);
            let lj = &mut log_joint[j * g..(j + 1) * g];
            params.log_joint_into(y, lj);
            features.push(features_from_log_joint(family, params, y, lj));
        }
        Self { g, log_joint, features }
    }

    fn row(&self, j: usize) -> &[f64] {
        &self.log_joint[j * self.g..(j + 1) * self.g]
    }

    fn value(&self, data: &PartialDataset, spec: &MechanismSpec) -> f64 {
        let mut a = vec![0.0; self.g];
        (0..data.len())
            .map(|j| {
                let lj = self.row(j);
                let f = &self.features[j];
                match data.observed_label(j) {
                    Some(z) => lj[z] + log_probs(predictor(spec.family(), spec.xi(), f, z).eta).log_obs,
                    None => {
                        for k in 0..self.g {
                            a[k] = lj[k] + log_probs(predictor(spec.family(), spec.xi(), f, k).eta).log_miss;
                        }
                        log_sum_exp(&a)
                    }
                }
            })
            .sum()
    }
}

fn objective(data: &PartialDataset, params: &MixtureParams, spec: &MechanismSpec) -> f64 {
    RowCache::new(data, params, spec.family()).value(data, spec)
}

fn run_full(data: &PartialDataset, init: MixtureParams, spec: MechanismSpec, opts: &FitOptions) -> Result<RunOutcome> {
    let g = data.n_classes();
    if init.n_components() != g {
        return Err(Error::DimensionMismatch {
            what: "component count",
            expected: g,
            found: init.n_components(),
        });
    }
    let family = spec.family();
    let mut theta = init;
    let mut spec = spec;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut em_enabled = true;
    let mut current = objective(data, &theta, &spec);
    for it in 0..opts.max_iter {
        if !current.is_finite() {
            return Err(Error::InvalidData(format!("non-finite log-likelihood at iteration {it}")));
        }
        let done = trace.last().is_some_and(|&prev| relative_change(prev, current) < opts.rel_tol);
        trace.push(current);
        if done {
            converged = true;
            break;
        }
        if it + 1 == opts.max_iter {
            break;
        }

        if em_enabled {
            match em_theta_step(data, &theta, &spec, current, opts)? {
                Some((next, value)) => {
                    theta = next;
                    current = value;
                }
                // the gradient steps take over once EM stops making progress
                None => em_enabled = family == MechanismFamily::Mcar,
            }
        }

        if family != MechanismFamily::Mcar {
            let (next, value) = bhhh_step(data, &theta, &spec, current, opts);
            theta = next;
            current = value;
        }

        let cache = RowCache::new(data, &theta, family);
        let (next_spec, value) = newton_xi(data, &cache, spec, current)?;
        spec = next_spec;
        current = value;
    }
    Ok(RunOutcome {
        theta,
        xi: Some(spec),
        trace,
        converged,
    })
}

/// EM update of `theta` with responsibilities that include the mechanism
/// factor, damped toward `theta` in free coordinates until it does not lower
/// the objective. Returns the accepted parameters and objective, or `None`
/// when every damped step lowers the objective.
fn em_theta_step(
    data: &PartialDataset,
    theta: &MixtureParams,
    spec: &MechanismSpec,
    current: f64,
    opts: &FitOptions,
) -> Result<Option<(MixtureParams, f64)>> {
    let g = theta.n_components();
    let cache = RowCache::new(data, theta, spec.family());
    let mut resp = vec![0.0; data.len() * g];
    let mut a = vec![0.0; g];
    for j in 0..data.len() {
        let row = &mut resp[j * g..(j + 1) * g];
        match data.observed_label(j) {
            Some(z) => row[z] = 1.0,
            None => {
                let lj = cache.row(j);
                let f = &cache.features[j];
                for k in 0..g {
                    a[k] = lj[k] + log_probs(predictor(spec.family(), spec.xi(), f, k).eta).log_miss;
                }
                let lse = log_sum_exp(&a);
                for k in 0..g {
                    row[k] = (a[k] - lse).exp();
                }
            }
        }
    }
    let candidate = m_step(data, &resp, g, opts.homoscedastic, opts.ridge)?;
    let value = objective(data, &candidate, spec);
    if value >= current {
        return Ok(Some((candidate, value)));
    }
    let coords = FreeCoordinates::of(theta);
    let from = coords.encode(theta);
    let to = coords.encode(&candidate);
    let mut t = 0.5;
    for _ in 0..EM_DAMPING_HALVINGS {
        if let Ok(blend) = coords.decode(&(&from + (&to - &from) * t)) {
            let value = objective(data, &blend, spec);
            if value >= current {
                return Ok(Some((blend, value)));
            }
        }
        t *= 0.5;
    }
    Ok(None)
}

/// One BHHH ascent step on the full log-likelihood in free coordinates,
/// with step halving. Keeps `theta` when no step improves the objective.
fn bhhh_step(
    data: &PartialDataset,
    theta: &MixtureParams,
    spec: &MechanismSpec,
    current: f64,
    opts: &FitOptions,
) -> (MixtureParams, f64) {
    let coords = FreeCoordinates::of(theta);
    let d = coords.dim();
    let mut outer = DMatrix::zeros(d, d);
    let mut total = DVector::zeros(d);
    for j in 0..data.len() {
        let y = data.row(j);
        let lg = log_joint_gradients(&coords, theta, y);
        let (_, s) = full_row(&lg, theta, spec, y, data.observed_label(j));
        if s.iter().any(|v| !v.is_finite()) {
            return (theta.clone(), current);
        }
        outer.ger(1.0, &s, &s, 1.0);
        total += &s;
    }
    let scale = outer.trace() / d as f64;
    for i in 0..d {
        outer[(i, i)] += opts.ridge * scale.max(1.0);
    }
    let direction = match outer.cholesky() {
        Some(c) => c.solve(&total),
        None => return (theta.clone(), current),
    };
    // a step this small cannot move the objective past the stopping rule
    if total.dot(&direction) < 1e-3 * opts.rel_tol * current.abs() {
        return (theta.clone(), current);
    }
    let base = coords.encode(theta);
    let mut t = 1.0;
    for _ in 0..=BHHH_HALVINGS {
        if let Ok(next) = coords.decode(&(&base + &direction * t)) {
            let value = objective(data, &next, spec);
            if value > current {
                return (next, value);
            }
        }
        t *= 0.5;
    }
    (theta.clone(), current)
}

/// Value, gradient and Hessian in `xi` of the full log-likelihood with the
/// per-row mixture terms held fixed. The second Hessian is the
/// expected-mechanism (Q-function) Hessian, which is never indefinite.
fn xi_derivatives(
    data: &PartialDataset,
    cache: &RowCache,
    spec: &MechanismSpec,
) -> (f64, DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let k_xi = spec.xi().len();
    let g = cache.g;
    let family = spec.family();
    let mut value = 0.0;
    let mut grad = DVector::zeros(k_xi);
    let mut hess = DMatrix::zeros(k_xi, k_xi);
    let mut q_hess = DMatrix::zeros(k_xi, k_xi);
    let mut a = vec![0.0; g];
    let mut row_grads = vec![DVector::zeros(k_xi); g];
    let mut mean = DVector::zeros(k_xi);
    let mut add_curvature = |pred: &Predictor, w: f64, hess: &mut DMatrix<f64>| {
        for r in 0..pred.width {
            for c in 0..pred.width {
                let h = w * pred.u[r] * pred.u[c];
                hess[(pred.offset + r, pred.offset + c)] += h;
                q_hess[(pred.offset + r, pred.offset + c)] += h;
            }
        }
    };
    for j in 0..data.len() {
        let lj = cache.row(j);
        let f = &cache.features[j];
        let label = data.observed_label(j);
        if label.is_some() || family != MechanismFamily::MnarClass {
            // one class-free (or known-class) mechanism factor
            let pred = predictor(family, spec.xi(), f, label.unwrap_or(0));
            let lp = log_probs(pred.eta);
            let (mixture, log_p, slope) = match label {
                Some(z) => (lj[z], lp.log_obs, lp.d_obs),
                None => (log_sum_exp(lj), lp.log_miss, lp.d_miss),
            };
            value += mixture + log_p;
            for i in 0..pred.width {
                grad[pred.offset + i] += slope * pred.u[i];
            }
            add_curvature(&pred, lp.curvature, &mut hess);
            continue;
        }
        // unlabelled MNAR row: log sum_k exp(l_k + log q_k)
        let mut preds = Vec::with_capacity(g);
        for k in 0..g {
            let pred = predictor(family, spec.xi(), f, k);
            let lp = log_probs(pred.eta);
            a[k] = lj[k] + lp.log_miss;
            row_grads[k].fill(0.0);
            for i in 0..pred.width {
                row_grads[k][pred.offset + i] = lp.d_miss * pred.u[i];
            }
            preds.push((pred, lp.curvature));
        }
        let lse = log_sum_exp(&a);
        value += lse;
        mean.fill(0.0);
        for (k, (pred, curvature)) in preds.iter().enumerate() {
            let w = (a[k] - lse).exp();
            add_curvature(pred, w * curvature, &mut hess);
            mean.axpy(w, &row_grads[k], 1.0);
            hess.ger(w, &row_grads[k], &row_grads[k], 1.0);
        }
        hess.ger(-1.0, &mean, &mean, 1.0);
        grad += &mean;
    }
    (value, grad, hess, q_hess)
}

/// Solves `(-H) d = grad`, falling back to the Q-Hessian and then to
/// increasing diagonal loading when the matrix is not negative definite.
fn newton_direction(grad: &DVector<f64>, hess: &DMatrix<f64>, q_hess: &DMatrix<f64>) -> DVector<f64> {
    let k = grad.len();
    for h in [hess, q_hess] {
        if let Some(c) = (-h).cholesky() {
            let d = c.solve(grad);
            if d.iter().all(|v| v.is_finite()) {
                return d;
            }
        }
    }
    let scale = q_hess.diagonal().abs().max().max(1.0);
    let mut load = 1e-8 * scale;
    loop {
        let m = -q_hess + DMatrix::identity(k, k) * load;
        if let Some(c) = m.cholesky() {
            return c.solve(grad);
        }
        load *= 10.0;
    }
}

/// Newton ascent on `xi` with `theta` fixed. `current` is the objective at
/// the incoming `spec`.
fn newton_xi(data: &PartialDataset, cache: &RowCache, spec: MechanismSpec, current: f64) -> Result<(MechanismSpec, f64)> {
    let mut spec = spec;
    let mut current = current;
    for _ in 0..MAX_NEWTON_ITER {
        let (_, grad, hess, q_hess) = xi_derivatives(data, cache, &spec);
        let direction = newton_direction(&grad, &hess, &q_hess);
        let predicted = grad.dot(&direction);
        let tol = 1e-12 * current.abs().max(1.0);
        if grad.norm() < 1e-10 || predicted < tol {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let xi: Vec<f64> = spec.xi().iter().zip(direction.iter()).map(|(x, d)| x + t * d).collect();
            if let Ok(candidate) = spec.with_xi(xi) {
                let value = cache.value(data, &candidate);
                if value >= current {
                    accepted = Some((candidate, value));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((candidate, value)) => {
                let gain = value - current;
                spec = candidate;
                current = value;
                if gain <= tol {
                    break;
                }
            }
            None if predicted < 1e-8 * current.abs().max(1.0) => break,
            None => {
                return Err(Error::MechanismStepFailure {
                    iterate: spec.xi().to_vec(),
                    gradient_norm: grad.norm(),
                    halvings: MAX_HALVINGS,
                })
            }
        }
    }
    Ok((spec, current))
}
