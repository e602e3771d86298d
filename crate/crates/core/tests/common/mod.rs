#![allow(dead_code)]

use mixssl_core::mechanism::MechanismSpec;
use mixssl_core::sim::generate_dataset;
use mixssl_core::{rng, MechanismFamily, MixtureParams, PartialDataset};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn pair(w1: f64, m1: f64, m2: f64, var: f64) -> MixtureParams {
    MixtureParams::univariate_two_class(w1, m1, m2, var).unwrap()
}

pub fn canonical() -> MixtureParams {
    pair(0.5, -1.0, 1.0, 1.0)
}

pub fn mar(xi0: f64, xi1: f64) -> MechanismSpec {
    MechanismSpec::new(MechanismFamily::MarEntropy, vec![xi0, xi1]).unwrap()
}

pub fn draw(theta: &MixtureParams, spec: &MechanismSpec, n: usize, seed: u64) -> PartialDataset {
    let mut r = rng::stream(seed, "test-data");
    generate_dataset(theta, spec, n, &mut r).unwrap()
}

/// Random `g`-component mixture in `p` dimensions with well-separated means.
pub fn random_mixture(r: &mut impl Rng, g: usize, p: usize, homoscedastic: bool) -> MixtureParams {
    let raw: Vec<f64> = (0..g).map(|_| r.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let means = (0..g)
        .map(|k| DVector::from_fn(p, |a, _| if a == 0 { 3.0 * k as f64 } else { 0.0 } + r.random_range(-0.5..0.5)))
        .collect();
    let cov = |r: &mut dyn rand::RngCore| {
        let a = DMatrix::from_fn(p, p, |_, _| r.random_range(-0.6..0.6));
        &a * a.transpose() + DMatrix::identity(p, p) * 0.5
    };
    if homoscedastic {
        let c = cov(r);
        MixtureParams::homoscedastic(weights, means, c).unwrap()
    } else {
        let covs = (0..g).map(|_| cov(r)).collect();
        MixtureParams::new(weights, means, covs).unwrap()
    }
}

/// Steps in `trace` never fall by more than `slack`.
pub fn nondecreasing(trace: &[f64], slack: f64) -> bool {
    trace.windows(2).all(|w| w[1] >= w[0] - slack)
}
