mod common;

use common::*;
use mixssl_core::em::{fit_full, fit_full_from, fit_ignorable, fit_ignorable_from, log_lik_ignorable};
use mixssl_core::mechanism::logit;
use mixssl_core::{Error, FitOptions, InitStrategy, MechanismFamily, MechanismSpec, MixtureParams, PartialDataset};

/// Textbook EM for a univariate two-component mixture with a shared variance.
fn vanilla_em(y: &[f64], mut w: f64, mut m: [f64; 2], mut v: f64, iters: usize) -> (f64, [f64; 2], f64) {
    let n = y.len() as f64;
    for _ in 0..iters {
        let dens = |x: f64, mu: f64| (-(x - mu).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let r: Vec<f64> = y
            .iter()
            .map(|&x| {
                let a = w * dens(x, m[0]);
                let b = (1.0 - w) * dens(x, m[1]);
                a / (a + b)
            })
            .collect();
        let s0: f64 = r.iter().sum();
        let s1 = n - s0;
        m = [
            r.iter().zip(y).map(|(r, x)| r * x).sum::<f64>() / s0,
            r.iter().zip(y).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / s1,
        ];
        v = r
            .iter()
            .zip(y)
            .map(|(r, x)| r * (x - m[0]).powi(2) + (1.0 - r) * (x - m[1]).powi(2))
            .sum::<f64>()
            / n;
        w = s0 / n;
    }
    (w, m, v)
}

#[test]
fn unlabelled_fit_matches_vanilla_em() {
    let theta = pair(0.5, -1.5, 1.5, 1.0);
    let data = draw(&theta, &MechanismSpec::mcar(40.0).unwrap(), 1000, 21);
    let y: Vec<f64> = (0..data.len()).map(|j| data.row(j)[0]).collect();
    let init = pair(0.4, -1.0, 0.5, 2.0);
    let opts = FitOptions { rel_tol: 1e-14, max_iter: 5000, ..FitOptions::default() };
    let fit = fit_ignorable_from(&data, &init, &opts).unwrap();
    let (w, m, v) = vanilla_em(&y, 0.4, [-1.0, 0.5], 2.0, 5000);
    let oracle = pair(w, m[0], m[1], v);
    assert!(fit.theta_hat.max_abs_diff(&oracle) < 1e-6, "{:?} vs {:?}", fit.theta_hat, oracle);
}

#[test]
fn unlabelled_symmetric_data_gives_equal_weights() {
    let theta = pair(0.5, -2.0, 2.0, 1.0);
    let data = draw(&theta, &MechanismSpec::mcar(40.0).unwrap(), 2000, 5);
    let fit = fit_ignorable(&data, &FitOptions::default()).unwrap();
    // sd of the weight estimate is about 0.012 here
    assert!((fit.theta_hat.weights()[0] - 0.5).abs() < 0.04);
    assert!(fit.theta_hat.mean(0)[0] < fit.theta_hat.mean(1)[0]);
}

#[test]
fn means_recovered_under_mcar() {
    let theta = canonical();
    let spec = MechanismSpec::mcar(logit(0.7)).unwrap();
    for seed in 0..20 {
        let data = draw(&theta, &spec, 2000, 100 + seed);
        let fit = fit_ignorable(&data, &FitOptions { seed, ..FitOptions::default() }).unwrap();
        for (k, truth) in [-1.0, 1.0].iter().enumerate() {
            assert!((fit.theta_hat.mean(k)[0] - truth).abs() < 0.15, "seed {seed} component {k}");
        }
    }
}

#[test]
fn mcar_full_fit_reduces_to_ignorable_fit() {
    let theta = pair(0.4, -1.0, 1.2, 1.0);
    let spec = MechanismSpec::mcar(0.3).unwrap();
    for seed in 0..5 {
        let data = draw(&theta, &spec, 400, 30 + seed);
        let opts = FitOptions { seed, rel_tol: 1e-13, max_iter: 5000, ..FitOptions::default() };
        let full = fit_full(&data, MechanismFamily::Mcar, &opts).unwrap();
        let ignorable = fit_ignorable(&data, &opts).unwrap();
        assert!(full.theta_hat.max_abs_diff(&ignorable.theta_hat) < 1e-6, "seed {seed}");
        let rate = data.n_missing() as f64 / data.len() as f64;
        assert!((full.xi_hat.unwrap().xi()[0] - logit(rate)).abs() < 1e-6);
    }
}

#[test]
fn mar_entropy_parameters_recovered() {
    let theta = canonical();
    let spec = mar(-1.0, 2.0);
    for seed in 0..20 {
        let data = draw(&theta, &spec, 5000, 200 + seed);
        let opts = FitOptions { seed, n_restarts: 2, ..FitOptions::default() };
        let fit = fit_full(&data, MechanismFamily::MarEntropy, &opts).unwrap();
        let xi = fit.xi_hat.unwrap();
        let err = xi.xi().iter().zip(spec.xi()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.5, "seed {seed}: {:?}", xi.xi());
    }
}

#[test]
fn traces_are_nondecreasing() {
    let theta = canonical();
    let specs = [
        MechanismSpec::mcar(0.5).unwrap(),
        mar(-1.0, 3.0),
        MechanismSpec::new(MechanismFamily::MnarClass, vec![0.5, 1.0, -0.5, 0.0]).unwrap(),
    ];
    for (i, spec) in specs.iter().enumerate() {
        for seed in 0..6 {
            let data = draw(&theta, spec, 300, 10 * i as u64 + seed);
            let opts = FitOptions { seed, n_restarts: 2, ..FitOptions::default() };
            let full = fit_full(&data, spec.family(), &opts).unwrap();
            assert!(nondecreasing(&full.loglik_trace, 1e-9), "{} seed {seed}", spec.family());
            let ign = fit_ignorable(&data, &opts).unwrap();
            assert!(nondecreasing(&ign.loglik_trace, 1e-9));
            if full.converged {
                let t = &full.loglik_trace;
                let last = t[t.len() - 1];
                assert!((last - t[t.len() - 2]).abs() < opts.rel_tol * t[t.len() - 2].abs());
            }
        }
    }
}

#[test]
fn fits_are_deterministic() {
    let theta = canonical();
    let spec = mar(-1.0, 2.0);
    let data = draw(&theta, &spec, 300, 77);
    let opts = FitOptions { seed: 9, init_strategy: InitStrategy::RandomResponsibilities, ..FitOptions::default() };
    let a = fit_full(&data, MechanismFamily::MarEntropy, &opts).unwrap();
    let b = fit_full(&data, MechanismFamily::MarEntropy, &opts).unwrap();
    assert_eq!(a.loglik_trace, b.loglik_trace);
    assert_eq!(a.theta_hat.max_abs_diff(&b.theta_hat), 0.0);
    assert_eq!(a.xi_hat, b.xi_hat);
    assert_eq!(a.restart_index, b.restart_index);
}

#[test]
fn canonical_order_ignores_initial_labelling() {
    let theta = pair(0.4, -1.5, 1.5, 1.0);
    let data = draw(&theta, &MechanismSpec::mcar(40.0).unwrap(), 800, 3);
    let init = pair(0.6, -0.5, 0.8, 1.5);
    let opts = FitOptions { rel_tol: 1e-12, max_iter: 3000, ..FitOptions::default() };
    let a = fit_ignorable_from(&data, &init, &opts).unwrap();
    let b = fit_ignorable_from(&data, &init.permuted(&[1, 0]).unwrap(), &opts).unwrap();
    assert!(a.theta_hat.max_abs_diff(&b.theta_hat) < 1e-6);
    assert_eq!(a.theta_hat.canonicalized().max_abs_diff(&a.theta_hat), 0.0);
}

#[test]
fn one_more_cycle_changes_little_at_convergence() {
    let theta = canonical();
    let data = draw(&theta, &MechanismSpec::mcar(0.5).unwrap(), 500, 12);
    let opts = FitOptions::default();
    let fit = fit_ignorable(&data, &opts).unwrap();
    assert!(fit.converged);
    let again = fit_ignorable_from(&data, &fit.theta_hat, &FitOptions { max_iter: 2, ..opts.clone() }).unwrap();
    let t = &again.loglik_trace;
    assert!((t[1] - t[0]).abs() < opts.rel_tol * t[0].abs());
    assert!((t[0] - log_lik_ignorable(&data, &fit.theta_hat).unwrap()).abs() < 1e-9);
}

#[test]
fn empty_component_aborts_every_restart() {
    let data = PartialDataset::new(1, 2, vec![0.0, 0.5, 1.0], vec![0, 0, 0], vec![false; 3]).unwrap();
    let err = fit_ignorable(&data, &FitOptions::default()).unwrap_err();
    assert!(matches!(err, Error::DegenerateComponent { component: 1, .. }), "{err}");
}

#[test]
fn mnar_fit_needs_homoscedastic_model() {
    let data = draw(&canonical(), &MechanismSpec::mcar(0.0).unwrap(), 50, 1);
    let opts = FitOptions { homoscedastic: false, ..FitOptions::default() };
    assert!(matches!(fit_full(&data, MechanismFamily::MnarClass, &opts), Err(Error::Unsupported(_))));
}

#[test]
fn warm_start_from_truth_keeps_truth_close() {
    let theta: MixtureParams = canonical();
    let spec = MechanismSpec::new(MechanismFamily::MnarClass, vec![0.5, 1.0, -0.5, 0.0]).unwrap();
    let data = draw(&theta, &spec, 3000, 5);
    let fit = fit_full_from(&data, &theta, &spec, &FitOptions::default()).unwrap();
    assert!(fit.theta_hat.max_abs_diff(&theta) < 0.15);
    assert!(nondecreasing(&fit.loglik_trace, 1e-9));
}
