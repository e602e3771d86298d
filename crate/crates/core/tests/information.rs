mod common;

use common::{canonical, draw, mar, pair, random_mixture};
use mixssl_core::coords::FreeCoordinates;
use mixssl_core::em::{fit_full, fit_ignorable};
use mixssl_core::fisher::{
    check_decomposition, decompose, estimate_info, score_theta, Conditioning, InfoKind, ScoreRow,
};
use mixssl_core::mechanism::{mechanism_grad_xi, mechanism_loglik_per_class};
use mixssl_core::mixture::log_sum_exp;
use mixssl_core::{rng, Error, FitOptions, MechanismFamily, MechanismSpec, MixtureParams, Observation};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

const H: f64 = 1e-5;

fn close(analytic: f64, numeric: f64, rel: f64) -> bool {
    (analytic - numeric).abs() <= rel * numeric.abs().max(1.0)
}

/// Row log-likelihood under `conditioning`, written from public primitives.
fn row_loglik(params: &MixtureParams, y: &[f64], class: usize, missing: bool, which: &str, spec: Option<&MechanismSpec>) -> f64 {
    let lj = params.log_joint(y);
    match which {
        "complete" => lj[class],
        "marginal" => log_sum_exp(&lj),
        "conditional" => lj[class] - log_sum_exp(&lj),
        _ => {
            let spec = spec.unwrap();
            let log_miss = mechanism_loglik_per_class(y, spec, params).unwrap();
            if missing {
                let a: Vec<f64> = lj.iter().zip(&log_miss).map(|(l, m)| l + m).collect();
                log_sum_exp(&a)
            } else {
                let q = log_miss[class].exp();
                lj[class] + (1.0 - q).ln()
            }
        }
    }
}

fn fuzzed_spec(r: &mut impl Rng, family: MechanismFamily) -> MechanismSpec {
    let xi = match family {
        MechanismFamily::Mcar => vec![r.random_range(-1.5..1.5)],
        MechanismFamily::MarEntropy => vec![r.random_range(-1.5..1.0), r.random_range(-2.0..3.0)],
        MechanismFamily::MnarClass => (0..4).map(|_| r.random_range(-1.0..1.0)).collect(),
    };
    MechanismSpec::new(family, xi).unwrap()
}

#[test]
fn theta_scores_match_finite_differences() {
    let mut r = rng::stream(11, "score-fd");
    let kinds = ["complete", "marginal", "conditional", "full"];
    for case in 0..200 {
        let family = MechanismFamily::ALL[case % 3];
        let (g, homo) = if family == MechanismFamily::MnarClass { (2, true) } else { (2 + case % 2, case % 4 < 2) };
        let p = 1 + (case / 3) % 2;
        let params = random_mixture(&mut r, g, p, homo);
        let spec = fuzzed_spec(&mut r, family);
        let coords = FreeCoordinates::of(&params);
        let base = coords.encode(&params);
        let mut y = vec![0.0; p];
        let class = params.draw(&mut r, &mut y);
        let missing = r.random_bool(0.5);
        let which = kinds[case % 4];
        let conditioning = match which {
            "complete" => Conditioning::Complete,
            "marginal" => Conditioning::Marginal,
            "conditional" => Conditioning::ClassGivenFeatures,
            _ => Conditioning::Full(&spec),
        };
        let row = ScoreRow { y: &y, class: Some(class), missing };
        let analytic = score_theta(&row, &params, conditioning).unwrap();
        for i in 0..coords.dim() {
            let shifted = |s: f64| {
                let mut v = base.clone();
                v[i] += s;
                let at = coords.decode(&v).unwrap();
                row_loglik(&at, &y, class, missing, which, Some(&spec))
            };
            let numeric = (shifted(H) - shifted(-H)) / (2.0 * H);
            assert!(
                close(analytic[i], numeric, 1e-5),
                "case {case} {which} {family} coordinate {}: {} vs {numeric}",
                coords.label(i),
                analytic[i]
            );
        }
    }
}

#[test]
fn xi_gradients_match_finite_differences() {
    let mut r = rng::stream(12, "xi-fd");
    for case in 0..200 {
        let family = MechanismFamily::ALL[case % 3];
        let params = random_mixture(&mut r, 2, 1 + case % 2, true);
        let spec = fuzzed_spec(&mut r, family);
        let mut y = vec![0.0; params.dim()];
        let class = params.draw(&mut r, &mut y);
        let missing = r.random_bool(0.5);
        let value = |xi: &[f64]| {
            let s = spec.with_xi(xi.to_vec()).unwrap();
            row_loglik(&params, &y, class, missing, "full", Some(&s))
        };
        let obs = Observation { y: &y, label: (!missing).then_some(class) };
        let weights = (missing && family == MechanismFamily::MnarClass).then(|| {
            let lj = params.log_joint(&y);
            let lm = mechanism_loglik_per_class(&y, &spec, &params).unwrap();
            let a: Vec<f64> = lj.iter().zip(&lm).map(|(l, m)| l + m).collect();
            let lse = log_sum_exp(&a);
            a.iter().map(|v| (v - lse).exp()).collect::<Vec<_>>()
        });
        let analytic = mechanism_grad_xi(&obs, &spec, &params, weights.as_deref()).unwrap();
        for i in 0..spec.xi().len() {
            let mut up = spec.xi().to_vec();
            let mut down = up.clone();
            up[i] += H;
            down[i] -= H;
            let numeric = (value(&up) - value(&down)) / (2.0 * H);
            assert!(close(analytic[i], numeric, 1e-5), "case {case} {family} xi[{i}]: {} vs {numeric}", analytic[i]);
        }
    }
}

#[test]
fn complete_score_needs_class() {
    let params = canonical();
    let row = ScoreRow { y: &[0.3], class: None, missing: true };
    assert!(matches!(score_theta(&row, &params, Conditioning::Complete), Err(Error::ContractViolation(_))));
    assert!(score_theta(&row, &params, Conditioning::Marginal).is_ok());
    let bad = ScoreRow { y: &[0.3, 1.0], class: Some(0), missing: false };
    assert!(matches!(score_theta(&bad, &params, Conditioning::Marginal), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn too_few_samples_rejected() {
    let err = estimate_info(InfoKind::Uc, &canonical(), None, 10, 0).unwrap_err();
    assert!(matches!(err, Error::TooFewSamples { .. }));
    let err = estimate_info(InfoKind::PcFull, &canonical(), None, 5000, 0).unwrap_err();
    assert!(matches!(err, Error::MissingMechanism(_)));
}

#[test]
fn unlabelled_identity_holds_on_fuzzed_settings() {
    let mut r = rng::stream(13, "uc-identity");
    for case in 0..5 {
        let params = random_mixture(&mut r, 2 + case % 2, 1 + case % 2, case % 2 == 0);
        let spec = MechanismSpec::mcar(0.0).unwrap();
        let report = check_decomposition(&params, &spec, 20_000, case as u64).unwrap();
        assert!(report.uc_identity.within(4.0), "case {case}: max |z| {}", report.uc_identity.max_abs_z);
    }
}

#[test]
fn mcar_missing_information_vanishes() {
    let spec = MechanismSpec::mcar(0.0).unwrap();
    let report = check_decomposition(&canonical(), &spec, 50_000, 3).unwrap();
    let miss = &report.decomposition.i_pc_miss;
    let worst = miss.matrix.zip_map(&miss.mc_se, |v, s| if v == 0.0 { 0.0 } else { v.abs() / s }).max();
    assert!(worst < 4.0, "max |z| {worst}");
    assert!(report.residual.within(4.0));
}

#[test]
fn all_missing_mcar_full_equals_unlabelled() {
    let spec = MechanismSpec::mcar(60.0).unwrap();
    let d = decompose(&canonical(), &spec, 5000, 4).unwrap();
    assert_eq!(d.gamma, 1.0);
    let diff = (&d.i_pc_full.matrix - &d.i_uc.matrix).abs().max();
    assert!(diff < 1e-9, "{diff}");
}

#[test]
fn none_missing_full_equals_complete() {
    let spec = MechanismSpec::mcar(-60.0).unwrap();
    let d = decompose(&canonical(), &spec, 5000, 4).unwrap();
    assert_eq!(d.gamma, 0.0);
    let diff = (&d.i_pc_full.matrix - &d.i_cc.matrix).abs().max();
    assert!(diff < 1e-9, "{diff}");
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

#[test]
fn information_matrices_are_psd() {
    let mut r = rng::stream(14, "psd");
    for case in 0..4 {
        let params = random_mixture(&mut r, 2, 1 + case % 2, true);
        let spec = mar(-0.5, 1.5);
        let d = decompose(&params, &spec, 10_000, case as u64).unwrap();
        for kind in [InfoKind::Cc, InfoKind::CcClr, InfoKind::Uc, InfoKind::PcFull] {
            let m = &d.get(kind).matrix;
            assert!(min_eigenvalue(m) > -1e-10 * m.abs().max(), "{kind:?}");
        }
        let report = check_decomposition(&params, &spec, 10_000, case as u64).unwrap();
        let scale = d.i_cc.matrix.abs().max();
        assert!(report.cc_minus_clr_eigenvalues[0] > -0.02 * scale, "{:?}", report.cc_minus_clr_eigenvalues);
    }
}

#[test]
fn decomposition_residual_is_small() {
    let spec = mar(-1.0, 2.0);
    let report = check_decomposition(&canonical(), &spec, 20_000, 8).unwrap();
    assert!(report.residual.max_abs_z < 1e-6 || report.residual.within(4.0));
    assert!(report.uc_identity.within(4.0));
}

#[test]
fn information_independent_of_thread_count() {
    let spec = mar(-1.0, 2.0);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| decompose(&canonical(), &spec, 9000, 21).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.i_pc_miss.matrix, b.i_pc_miss.matrix);
    assert_eq!(a.i_uc.mc_se, b.i_uc.mc_se);
}

fn total_score(data: &mixssl_core::PartialDataset, params: &MixtureParams, spec: Option<&MechanismSpec>) -> DVector<f64> {
    let mut total = DVector::zeros(FreeCoordinates::of(params).dim());
    for j in 0..data.len() {
        let obs = data.observation(j);
        let row = ScoreRow { y: obs.y, class: obs.label, missing: obs.label.is_none() };
        let conditioning = match (spec, obs.label) {
            (Some(s), _) => Conditioning::Full(s),
            (None, Some(_)) => Conditioning::Complete,
            (None, None) => Conditioning::Marginal,
        };
        total += score_theta(&row, params, conditioning).unwrap();
    }
    total
}

#[test]
fn scores_sum_to_zero_at_the_ignorable_mle() {
    let theta = pair(0.45, -1.0, 1.0, 1.0);
    let data = draw(&theta, &MechanismSpec::mcar(0.5).unwrap(), 600, 5);
    let opts = FitOptions { rel_tol: 1e-14, max_iter: 10_000, ridge: 1e-10, ..FitOptions::default() };
    let fit = fit_ignorable(&data, &opts).unwrap();
    let total = total_score(&data, &fit.theta_hat, None);
    assert!(total.amax() / (data.len() as f64) < 1e-5, "{total}");
}

#[test]
fn scores_sum_to_zero_at_the_full_mle() {
    let theta = canonical();
    let data = draw(&theta, &mar(-1.0, 2.0), 600, 6);
    let opts = FitOptions { rel_tol: 1e-14, max_iter: 10_000, ridge: 1e-10, ..FitOptions::default() };
    let fit = fit_full(&data, MechanismFamily::MarEntropy, &opts).unwrap();
    let spec = fit.xi_hat.clone().unwrap();
    let total = total_score(&data, &fit.theta_hat, Some(&spec));
    assert!(total.amax() / (data.len() as f64) < 1e-4, "{total}");
}
