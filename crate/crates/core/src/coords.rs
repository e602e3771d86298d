//! Unconstrained coordinates for mixture parameters.
//!
//! Layout of the coordinate vector:
//!
//! 1. `g - 1` log-ratios `log(pi_i / pi_g)` (for two classes, `logit pi_1`);
//! 2. every mean entry, component by component;
//! 3. the lower triangle of each covariance Cholesky factor, row by row,
//!    with diagonal entries on the log scale. A homoscedastic mixture has a
//!    single shared block.
//!
//! Scores and information matrices are expressed in these coordinates.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mixture::MixtureParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreeCoordinates {
    g: usize,
    p: usize,
    homoscedastic: bool,
}

impl FreeCoordinates {
    pub fn new(g: usize, p: usize, homoscedastic: bool) -> Self {
        Self { g, p, homoscedastic }
    }

    pub fn of(params: &MixtureParams) -> Self {
        Self::new(params.n_components(), params.dim(), params.is_homoscedastic())
    }

    fn tri(&self) -> usize {
        self.p * (self.p + 1) / 2
    }

    fn cov_blocks(&self) -> usize {
        if self.homoscedastic {
            1
        } else {
            self.g
        }
    }

    pub fn dim(&self) -> usize {
        (self.g - 1) + self.g * self.p + self.cov_blocks() * self.tri()
    }

    pub fn weight_range(&self) -> Range<usize> {
        0..self.g - 1
    }

    pub fn mean_range(&self, k: usize) -> Range<usize> {
        let start = self.g - 1 + k * self.p;
        start..start + self.p
    }

    /// Coordinates of the Cholesky block used by component `k`.
    pub fn cov_range(&self, k: usize) -> Range<usize> {
        let block = if self.homoscedastic { 0 } else { k };
        let start = self.g - 1 + self.g * self.p + block * self.tri();
        start..start + self.tri()
    }

    /// Human-readable name of coordinate `i`, e.g. `mean[1][0]`.
    pub fn label(&self, i: usize) -> String {
        if self.weight_range().contains(&i) {
            return format!("logratio[{i}]");
        }
        for k in 0..self.g {
            let r = self.mean_range(k);
            if r.contains(&i) {
                return format!("mean[{k}][{}]", i - r.start);
            }
        }
        let base = self.g - 1 + self.g * self.p;
        let block = (i - base) / self.tri();
        let mut idx = (i - base) % self.tri();
        for a in 0..self.p {
            if idx <= a {
                return if idx == a {
                    format!("logchol[{block}][{a}][{a}]")
                } else {
                    format!("chol[{block}][{a}][{idx}]")
                };
            }
            idx -= a + 1;
        }
        unreachable!("coordinate {i} out of range")
    }

    pub fn check(&self, params: &MixtureParams) -> Result<()> {
        if *self != Self::of(params) {
            return Err(Error::InvalidParams(format!(
                "coordinates for g={}, p={}, homoscedastic={} do not match the parameters",
                self.g, self.p, self.homoscedastic
            )));
        }
        Ok(())
    }

    pub fn encode(&self, params: &MixtureParams) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        let w = params.weights();
        let last = w[self.g - 1].ln();
        for i in self.weight_range() {
            v[i] = w[i].ln() - last;
        }
        for k in 0..self.g {
            let r = self.mean_range(k);
            v.rows_mut(r.start, self.p).copy_from(params.mean(k));
        }
        for block in 0..self.cov_blocks() {
            let l = &params.component(block).chol;
            let mut i = self.cov_range(block).start;
            for a in 0..self.p {
                for b in 0..=a {
                    v[i] = if a == b { l[(a, a)].ln() } else { l[(a, b)] };
                    i += 1;
                }
            }
        }
        v
    }

    pub fn decode(&self, v: &DVector<f64>) -> Result<MixtureParams> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "free coordinates",
                expected: self.dim(),
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("non-finite free coordinate".into()));
        }
        let mut logits: Vec<f64> = self.weight_range().map(|i| v[i]).collect();
        logits.push(0.0);
        let lse = crate::mixture::log_sum_exp(&logits);
        let mut weights: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let means = (0..self.g)
            .map(|k| DVector::from_iterator(self.p, self.mean_range(k).map(|i| v[i])))
            .collect();
        let covs: Vec<DMatrix<f64>> = (0..self.cov_blocks())
            .map(|block| {
                let mut l = DMatrix::zeros(self.p, self.p);
                let mut i = self.cov_range(block).start;
                for a in 0..self.p {
                    for b in 0..=a {
                        l[(a, b)] = if a == b { v[i].exp() } else { v[i] };
                        i += 1;
                    }
                }
                &l * l.transpose()
            })
            .collect();
        if self.homoscedastic {
            MixtureParams::homoscedastic(weights, means, covs.into_iter().next().unwrap())
        } else {
            MixtureParams::new(weights, means, covs)
        }
    }
}

/// `log pi_k + log f_k(y)` and its gradient in free coordinates for every component.
#[derive(Debug, Clone)]
pub struct LogJointGradients {
    pub log_joint: Vec<f64>,
    pub grads: Vec<DVector<f64>>,
}

pub fn log_joint_gradients(coords: &FreeCoordinates, params: &MixtureParams, y: &[f64]) -> LogJointGradients {
    let g = params.n_components();
    let p = params.dim();
    let weights = params.weights();
    let log_joint = params.log_joint(y);
    let mut grads = Vec::with_capacity(g);
    let mut r = vec![0.0; p];
    let mut s = vec![0.0; p];
    for k in 0..g {
        let mut grad = DVector::zeros(coords.dim());
        for i in coords.weight_range() {
            grad[i] = if i == k { 1.0 } else { 0.0 } - weights[i];
        }
        let c = params.component(k);
        for a in 0..p {
            r[a] = y[a] - c.mean[a];
        }
        // w = precision * r, s = L^{-1} r
        let mr = coords.mean_range(k);
        for a in 0..p {
            grad[mr.start + a] = (0..p).map(|b| c.precision[(a, b)] * r[b]).sum();
        }
        for a in 0..p {
            let acc: f64 = (0..a).map(|b| c.chol[(a, b)] * s[b]).sum();
            s[a] = (r[a] - acc) / c.chol[(a, a)];
        }
        let mut i = coords.cov_range(k).start;
        for a in 0..p {
            let wa = grad[mr.start + a];
            for b in 0..=a {
                grad[i] = if a == b {
                    wa * s[a] * c.chol[(a, a)] - 1.0
                } else {
                    wa * s[b]
                };
                i += 1;
            }
        }
        grads.push(grad);
    }
    LogJointGradients { log_joint, grads }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_params(r: &mut impl Rng, p: usize, homoscedastic: bool) -> MixtureParams {
        let w1 = r.random_range(0.2..0.8);
        let means = (0..2)
            .map(|_| DVector::from_fn(p, |_, _| r.random_range(-2.0..2.0)))
            .collect();
        let random_cov = |r: &mut dyn rand::RngCore| {
            let a = DMatrix::from_fn(p, p, |_, _| r.random_range(-1.0..1.0));
            &a * a.transpose() + DMatrix::identity(p, p) * 0.5
        };
        if homoscedastic {
            MixtureParams::homoscedastic(vec![w1, 1.0 - w1], means, random_cov(r)).unwrap()
        } else {
            let covs = vec![random_cov(r), random_cov(r)];
            MixtureParams::new(vec![w1, 1.0 - w1], means, covs).unwrap()
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let mut r = rng::stream(1, "coords-roundtrip");
        for &(p, h) in &[(1, true), (2, true), (3, false)] {
            let params = random_params(&mut r, p, h);
            let coords = FreeCoordinates::of(&params);
            let back = coords.decode(&coords.encode(&params)).unwrap();
            assert!(back.max_abs_diff(&params) < 1e-12);
        }
    }

    #[test]
    fn dimensions() {
        assert_eq!(FreeCoordinates::new(2, 1, true).dim(), 4);
        assert_eq!(FreeCoordinates::new(2, 2, true).dim(), 1 + 4 + 3);
        assert_eq!(FreeCoordinates::new(3, 2, false).dim(), 2 + 6 + 9);
        let c = FreeCoordinates::new(2, 2, true);
        let labels: Vec<String> = (0..c.dim()).map(|i| c.label(i)).collect();
        assert_eq!(labels[0], "logratio[0]");
        assert_eq!(labels[3], "mean[1][0]");
        assert_eq!(labels[5], "logchol[0][0][0]");
        assert_eq!(labels[6], "chol[0][1][0]");
        assert_eq!(labels[7], "logchol[0][1][1]");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(2, "coords-fd");
        for case in 0..60 {
            let p = 1 + case % 3;
            let params = random_params(&mut r, p, case % 2 == 0);
            let coords = FreeCoordinates::of(&params);
            let y: Vec<f64> = (0..p).map(|_| r.random_range(-3.0..3.0)).collect();
            let analytic = log_joint_gradients(&coords, &params, &y);
            let base = coords.encode(&params);
            for i in 0..coords.dim() {
                let h = 1e-6 * base[i].abs().max(1.0);
                let mut up = base.clone();
                let mut dn = base.clone();
                up[i] += h;
                dn[i] -= h;
                let lu = coords.decode(&up).unwrap().log_joint(&y);
                let ld = coords.decode(&dn).unwrap().log_joint(&y);
                for k in 0..2 {
                    let numeric = (lu[k] - ld[k]) / (2.0 * h);
                    let a = analytic.grads[k][i];
                    assert!(
                        (a - numeric).abs() <= 1e-5 * a.abs().max(1.0),
                        "case {case} coord {} comp {k}: {a} vs {numeric}",
                        coords.label(i)
                    );
                }
            }
        }
    }
}
