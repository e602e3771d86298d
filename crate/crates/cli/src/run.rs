//! Subcommand dispatch and the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use mixssl_core::em::{fit_full, fit_ignorable};
use mixssl_core::fisher::{check_decomposition, InfoKind, Residual};
use mixssl_core::sim::{generate, run_experiment};
use mixssl_core::{FitResult, MixtureParams};
use serde::Serialize;

use crate::config::RawConfig;
use crate::output::{num, read_dataset, write_dataset, write_matrix, write_pairs, writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    Fit,
    Info,
    Experiment,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Fit => "fit",
            Self::Info => "info",
            Self::Experiment => "experiment",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_digest: Option<String>,
    pub version: String,
    pub platform: String,
    pub duration_seconds: f64,
    pub outputs: Vec<String>,
    pub status: String,
    pub error: Option<String>,
}

pub const MANIFEST: &str = "manifest.json";

/// Runs `command` and writes its outputs plus `manifest.json` into `out`.
/// The manifest is written on failure too.
pub fn execute(command: Command, config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let mut digest = None;
    let mut outputs = Vec::new();
    let result = (|| -> anyhow::Result<()> {
        let mut raw = RawConfig::load(config)?;
        if let Some(seed) = seed {
            raw.override_seed(seed);
        }
        digest = Some(raw.digest());
        let mut run = Run { out, outputs: &mut outputs };
        match command {
            Command::Simulate => run.simulate(&raw),
            Command::Fit => run.fit(&raw),
            Command::Info => run.info(&raw),
            Command::Experiment => run.experiment(&raw),
        }
    })();
    let manifest = RunManifest {
        subcommand: command.as_str().into(),
        config_digest: digest,
        version: env!("CARGO_PKG_VERSION").into(),
        platform: format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH),
        duration_seconds: start.elapsed().as_secs_f64(),
        outputs,
        status: if result.is_ok() { "ok" } else { "error" }.into(),
        error: result.as_ref().err().map(|e| format!("{e:#}")),
    };
    let path = out.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, json).with_context(|| format!("cannot write {}", path.display()))?;
    result
}

struct Run<'a> {
    out: &'a Path,
    outputs: &'a mut Vec<String>,
}

impl Run<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn simulate(&mut self, raw: &RawConfig) -> anyhow::Result<()> {
        let scenario = raw.scenario()?;
        let data = generate(&scenario, 0)?;
        write_dataset(&self.path("dataset.csv"), &data)?;
        let xi: Vec<String> = scenario.mechanism.xi().iter().map(|v| num(*v)).collect();
        write_pairs(
            &self.path("simulate_summary.csv"),
            &[
                ("n", data.len().to_string()),
                ("n_missing", data.n_missing().to_string()),
                ("missing_fraction", num(data.missing_fraction())),
                ("mechanism", scenario.mechanism.family().to_string()),
                ("xi", xi.join(" ")),
            ],
        )
    }

    fn fit(&mut self, raw: &RawConfig) -> anyhow::Result<()> {
        let data = read_dataset(&raw.data_path()?, raw.n_classes()?)?;
        let opts = raw.fit_options()?;
        let fit = match raw.fit_mechanism()? {
            None => fit_ignorable(&data, &opts)?,
            Some(family) => fit_full(&data, family, &opts)?,
        };
        self.write_fit(&fit)
    }

    fn write_fit(&mut self, fit: &FitResult) -> anyhow::Result<()> {
        write_theta(&self.path("theta.csv"), &fit.theta_hat)?;
        if let Some(spec) = &fit.xi_hat {
            let mut w = writer(&self.path("xi.csv"))?;
            w.write_record(["family", "index", "value"])?;
            for (i, v) in spec.xi().iter().enumerate() {
                w.write_record([spec.family().as_str().to_string(), i.to_string(), num(*v)])?;
            }
            w.flush()?;
        }
        let mut w = writer(&self.path("trace.csv"))?;
        w.write_record(["iteration", "loglik"])?;
        for (i, v) in fit.loglik_trace.iter().enumerate() {
            w.write_record([i.to_string(), num(*v)])?;
        }
        w.flush()?;
        write_pairs(
            &self.path("fit_summary.csv"),
            &[
                ("loglik", num(fit.final_loglik())),
                ("converged", fit.converged.to_string()),
                ("n_iter", fit.n_iter.to_string()),
                ("restart_index", fit.restart_index.to_string()),
                ("failed_restarts", fit.failed_restarts.to_string()),
            ],
        )
    }

    fn info(&mut self, raw: &RawConfig) -> anyhow::Result<()> {
        let theta = raw.model()?;
        let spec = raw.mechanism(&theta)?;
        let report = check_decomposition(&theta, &spec, raw.n_mc()?, raw.seed()?)?;
        let d = &report.decomposition;

        let mut w = writer(&self.path("coordinates.csv"))?;
        w.write_record(["index", "coordinate"])?;
        for i in 0..d.coords.dim() {
            w.write_record([i.to_string(), d.coords.label(i)])?;
        }
        w.flush()?;

        for kind in InfoKind::ALL {
            let est = d.get(kind);
            let name = format!("info_{}.csv", kind.as_str().to_ascii_lowercase());
            write_matrix(&self.path(&name), &est.matrix, &est.mc_se)?;
        }
        write_residual(&self.path("decomposition.csv"), &report.residual)?;
        write_residual(&self.path("uc_identity.csv"), &report.uc_identity)?;

        let mut rows = vec![
            ("gamma", num(d.gamma)),
            ("n_mc", d.n_mc.to_string()),
            ("decomposition_max_abs_z", num(report.residual.max_abs_z)),
            ("uc_identity_max_abs_z", num(report.uc_identity.max_abs_z)),
            ("cc_minus_clr_min_eigenvalue", num(report.cc_minus_clr_eigenvalues[0])),
            ("pc_miss_min_eigenvalue", num(report.miss_eigen.min_eigenvalue)),
            ("pc_miss_min_eigenvalue_se", num(report.miss_eigen.mc_se)),
        ];
        if let Some(proj) = &report.miss_discriminant {
            rows.push(("pc_miss_discriminant_min_eigenvalue", num(proj.eigen.min_eigenvalue)));
            rows.push(("pc_miss_discriminant_min_eigenvalue_se", num(proj.eigen.mc_se)));
        }
        write_pairs(&self.path("info_summary.csv"), &rows)
    }

    fn experiment(&mut self, raw: &RawConfig) -> anyhow::Result<()> {
        let scenario = raw.scenario()?;
        let report = run_experiment(&scenario)?;

        let mut w = writer(&self.path("replicates.csv"))?;
        w.write_record(["replicate", "estimator", "error", "gamma", "converged"])?;
        for record in &report.records {
            for o in &record.outcomes {
                w.write_record([
                    record.replicate.to_string(),
                    o.estimator.to_string(),
                    o.error.map(num).unwrap_or_default(),
                    num(record.gamma),
                    o.converged.to_string(),
                ])?;
            }
        }
        w.flush()?;

        let mut w = writer(&self.path("summary.csv"))?;
        w.write_record(["estimator", "mean_error", "sd_error", "n_ok", "n_failed", "n_not_converged"])?;
        for s in &report.summaries {
            w.write_record([
                s.estimator.to_string(),
                num(s.mean_error),
                num(s.sd_error),
                s.n_ok.to_string(),
                s.n_failed.to_string(),
                s.n_not_converged.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = writer(&self.path("differences.csv"))?;
        w.write_record(["estimator", "baseline", "mean_difference", "bootstrap_se", "ci_low", "ci_high", "n_pairs"])?;
        for d in &report.differences {
            w.write_record([
                d.estimator.to_string(),
                "COMPLETE".to_string(),
                num(d.mean),
                num(d.bootstrap_se),
                num(d.ci_low),
                num(d.ci_high),
                d.n_pairs.to_string(),
            ])?;
        }
        w.flush()?;

        let xi: Vec<String> = scenario.mechanism.xi().iter().map(|v| num(*v)).collect();
        write_pairs(
            &self.path("experiment_summary.csv"),
            &[
                ("replicates", scenario.replicates.to_string()),
                ("n", scenario.n.to_string()),
                ("mechanism", scenario.mechanism.family().to_string()),
                ("xi", xi.join(" ")),
                ("mean_gamma", num(report.mean_gamma)),
                ("mean_bayes_error", num(report.mean_bayes_error)),
                ("failure_fraction", num(report.failure_fraction)),
                ("failures_flagged", report.failures_flagged.to_string()),
            ],
        )
    }
}

fn write_theta(path: &Path, theta: &MixtureParams) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["component", "parameter", "row", "col", "value"])?;
    for k in 0..theta.n_components() {
        let c = (k + 1).to_string();
        w.write_record([c.as_str(), "weight", "0", "0", &num(theta.weights()[k])])?;
        for (a, v) in theta.mean(k).iter().enumerate() {
            w.write_record([c.as_str(), "mean", &a.to_string(), "0", &num(*v)])?;
        }
        let cov = theta.covariance(k);
        for r in 0..cov.nrows() {
            for col in 0..cov.ncols() {
                w.write_record([c.as_str(), "covariance", &r.to_string(), &col.to_string(), &num(cov[(r, col)])])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_residual(path: &Path, residual: &Residual) -> anyhow::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["row", "col", "residual", "mc_se", "z"])?;
    for r in 0..residual.value.nrows() {
        for c in 0..residual.value.ncols() {
            w.write_record([
                r.to_string(),
                c.to_string(),
                num(residual.value[(r, c)]),
                num(residual.mc_se[(r, c)]),
                num(residual.z[(r, c)]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
