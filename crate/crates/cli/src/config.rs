//! INI-style run configuration.
//!
//! ```text
//! # comments start with '#'
//! [run]
//! seed = 42
//!
//! [model]
//! weights = 0.5, 0.5
//! means = -1; 1          # one vector per component
//! covariance = 1         # shared, row-major p x p
//!
//! [mechanism]
//! family = MAR_ENTROPY
//! xi = -1, 2
//! ```
//!
//! Every error names the offending key and, where there is one, its line.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mixssl_core::fisher::MIN_MC_SAMPLES;
use mixssl_core::sim::{Estimator, ScenarioConfig};
use mixssl_core::{FitOptions, InitStrategy, MechanismFamily, MechanismSpec, MixtureParams};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate key `{key}` on lines {first} and {second}")]
    DuplicateKey { key: String, first: usize, second: usize },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { section: String, line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("missing required key `{key}`")]
    MissingKey { key: String },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    InvalidValue { key: String, line: usize, message: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed"]),
    ("model", &["weights", "means", "covariance", "covariances"]),
    ("mechanism", &["family", "xi", "target_gamma", "calibration_n_mc"]),
    ("scenario", &["n", "n_test", "replicates", "estimators"]),
    (
        "fit",
        &["mechanism", "max_iter", "rel_tol", "n_restarts", "init_strategy", "ridge", "homoscedastic"],
    ),
    ("data", &["path", "n_classes"]),
    ("info", &["n_mc"]),
];

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// Parsed `section.key = value` entries, before interpretation.
#[derive(Debug, Clone)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
    base_dir: PathBuf,
}

impl RawConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        let mut section: Option<(&'static str, &'static [&'static str])> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line,
                    message: format!("unterminated section header `{content}`"),
                })?;
                let name = name.trim();
                section = Some(
                    SCHEMA
                        .iter()
                        .find(|(s, _)| *s == name)
                        .copied()
                        .ok_or_else(|| ConfigError::UnknownSection {
                            section: name.to_string(),
                            line,
                        })?,
                );
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, found `{content}`"),
            })?;
            let key = key.trim();
            let (section_name, keys) = section.ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("key `{key}` appears before any section header"),
            })?;
            let full = format!("{section_name}.{key}");
            if !keys.contains(&key) {
                return Err(ConfigError::UnknownKey { key: full, line });
            }
            if let Some(first) = entries.get(&full) {
                return Err(ConfigError::DuplicateKey {
                    key: full,
                    first: first.line,
                    second: line,
                });
            }
            entries.insert(
                full,
                Entry {
                    value: value.trim().to_string(),
                    line,
                },
            );
        }
        Ok(Self {
            entries,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Replaces `run.seed`, as the `--seed` flag does.
    pub fn override_seed(&mut self, seed: u64) {
        self.entries.insert(
            "run.seed".into(),
            Entry {
                value: seed.to_string(),
                line: 0,
            },
        );
    }

    /// SHA-256 over the sorted `section.key=value` lines, so comments,
    /// whitespace and key order do not change it.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (key, entry) in &self.entries {
            hasher.update(key.as_bytes());
            hasher.update(b"=");
            hasher.update(entry.value.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}.");
        self.entries.keys().any(|k| k.starts_with(&prefix))
    }

    fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.get(key)
    }

    fn invalid(&self, key: &str, message: impl fmt::Display) -> ConfigError {
        ConfigError::InvalidValue {
            key: key.to_string(),
            line: self.entry(key).map_or(0, |e| e.line),
            message: message.to_string(),
        }
    }

    fn required(&self, key: &str) -> Result<&Entry> {
        self.entry(key).ok_or_else(|| ConfigError::MissingKey { key: key.to_string() })
    }

    fn parse_value<T: FromStr>(&self, key: &str, entry: &Entry) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        entry.value.parse::<T>().map_err(|e| self.invalid(key, format!("`{}`: {e}", entry.value)))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.entry(key).map(|e| self.parse_value(key, e)).transpose()
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn get_required<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let entry = self.required(key)?;
        self.parse_value(key, entry)
    }

    fn list(&self, key: &str, text: &str) -> Result<Vec<f64>> {
        text.split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| self.invalid(key, format!("`{}`: {e}", v.trim())))
            })
            .collect()
    }

    fn required_list(&self, key: &str) -> Result<Vec<f64>> {
        let entry = self.required(key)?;
        self.list(key, &entry.value)
    }

    /// `a, b; c, d` → one vector per `;`-separated group.
    fn required_groups(&self, key: &str) -> Result<Vec<Vec<f64>>> {
        let entry = self.required(key)?;
        entry.value.split(';').map(|g| self.list(key, g)).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get_or("run.seed", 0)
    }

    pub fn model(&self) -> Result<MixtureParams> {
        let weights = self.required_list("model.weights")?;
        let g = weights.len();
        if g < 2 {
            return Err(self.invalid("model.weights", "need at least two components"));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(self.invalid("model.weights", "every weight must be positive"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(self.invalid("model.weights", format!("weights must sum to 1 (got {sum})")));
        }
        let means = self.required_groups("model.means")?;
        if means.len() != g {
            return Err(self.invalid("model.means", format!("expected {g} mean vectors, found {}", means.len())));
        }
        let p = means[0].len();
        if means.iter().any(|m| m.len() != p) {
            return Err(self.invalid("model.means", "mean vectors differ in length"));
        }
        let means: Vec<DVector<f64>> = means.into_iter().map(DVector::from_vec).collect();
        let square = |key: &str, values: Vec<f64>| -> Result<DMatrix<f64>> {
            if values.len() != p * p {
                return Err(self.invalid(key, format!("expected {} entries for a {p}x{p} matrix", p * p)));
            }
            Ok(DMatrix::from_row_slice(p, p, &values))
        };
        let model_error = |key: &str, e: mixssl_core::Error| self.invalid(key, e);
        match (self.entry("model.covariance"), self.entry("model.covariances")) {
            (Some(_), Some(_)) => Err(self.invalid("model.covariances", "give either `covariance` or `covariances`")),
            (None, None) => Err(ConfigError::MissingKey {
                key: "model.covariance".into(),
            }),
            (Some(_), None) => {
                let cov = square("model.covariance", self.required_list("model.covariance")?)?;
                MixtureParams::homoscedastic(weights, means, cov).map_err(|e| model_error("model.covariance", e))
            }
            (None, Some(_)) => {
                let groups = self.required_groups("model.covariances")?;
                if groups.len() != g {
                    return Err(self.invalid("model.covariances", format!("expected {g} matrices")));
                }
                let covs = groups
                    .into_iter()
                    .map(|v| square("model.covariances", v))
                    .collect::<Result<Vec<_>>>()?;
                MixtureParams::new(weights, means, covs).map_err(|e| model_error("model.covariances", e))
            }
        }
    }

    /// The mechanism, with intercepts recalibrated when `target_gamma` is set.
    pub fn mechanism(&self, theta: &MixtureParams) -> Result<MechanismSpec> {
        let family: MechanismFamily = self.get_required("mechanism.family")?;
        let spec = MechanismSpec::new(family, self.required_list("mechanism.xi")?)
            .map_err(|e| self.invalid("mechanism.xi", e))?;
        if family == MechanismFamily::MnarClass && theta.linear_discriminant().is_err() {
            return Err(self.invalid("mechanism.family", "MNAR_CLASS needs two components with a shared covariance"));
        }
        match self.get::<f64>("mechanism.target_gamma")? {
            None => Ok(spec),
            Some(target) => {
                if !(target > 0.0 && target < 1.0) {
                    return Err(self.invalid("mechanism.target_gamma", "must lie strictly between 0 and 1"));
                }
                let n_mc: usize = self.get_or("mechanism.calibration_n_mc", 200_000)?;
                if n_mc < MIN_MC_SAMPLES {
                    return Err(self.invalid("mechanism.calibration_n_mc", format!("must be at least {MIN_MC_SAMPLES}")));
                }
                mixssl_core::sim::calibrate_intercept(theta, &spec, target, n_mc, self.seed()?)
                    .map_err(|e| self.invalid("mechanism.target_gamma", e))
            }
        }
    }

    pub fn fit_options(&self) -> Result<FitOptions> {
        let defaults = FitOptions::default();
        let opts = FitOptions {
            max_iter: self.get_or("fit.max_iter", defaults.max_iter)?,
            rel_tol: self.get_or("fit.rel_tol", defaults.rel_tol)?,
            n_restarts: self.get_or("fit.n_restarts", defaults.n_restarts)?,
            seed: self.seed()?,
            init_strategy: self.get_or::<InitStrategy>("fit.init_strategy", defaults.init_strategy)?,
            ridge: self.get_or("fit.ridge", defaults.ridge)?,
            homoscedastic: self.get_or("fit.homoscedastic", defaults.homoscedastic)?,
        };
        if opts.max_iter < 1 {
            return Err(self.invalid("fit.max_iter", "must be at least 1"));
        }
        if !(opts.rel_tol > 0.0) {
            return Err(self.invalid("fit.rel_tol", "must be positive"));
        }
        if opts.n_restarts < 1 {
            return Err(self.invalid("fit.n_restarts", "must be at least 1"));
        }
        if !(opts.ridge >= 1e-10) {
            return Err(self.invalid("fit.ridge", "must be at least 1e-10"));
        }
        Ok(opts)
    }

    /// `None` selects the ignorable fit.
    pub fn fit_mechanism(&self) -> Result<Option<MechanismFamily>> {
        match self.entry("fit.mechanism") {
            None => Ok(None),
            Some(e) if e.value.eq_ignore_ascii_case("IGNORABLE") => Ok(None),
            Some(e) => self.parse_value("fit.mechanism", e).map(Some),
        }
    }

    pub fn scenario(&self) -> Result<ScenarioConfig> {
        let theta = self.model()?;
        let mechanism = self.mechanism(&theta)?;
        let n: usize = self.get_required("scenario.n")?;
        if n < 10 {
            return Err(self.invalid("scenario.n", "must be at least 10"));
        }
        let replicates: usize = self.get_or("scenario.replicates", 1)?;
        if replicates < 1 {
            return Err(self.invalid("scenario.replicates", "must be at least 1"));
        }
        let n_test: usize = self.get_or("scenario.n_test", ScenarioConfig::DEFAULT_N_TEST)?;
        if n_test < 1 {
            return Err(self.invalid("scenario.n_test", "must be at least 1"));
        }
        let mut config = ScenarioConfig::new(theta, mechanism, n, replicates, self.seed()?);
        config.n_test = n_test;
        if let Some(e) = self.entry("scenario.estimators") {
            config.estimators = e
                .value
                .split(',')
                .map(|s| s.parse::<Estimator>().map_err(|err| self.invalid("scenario.estimators", err)))
                .collect::<Result<Vec<_>>>()?;
        }
        config.fit = self.fit_options()?;
        config
            .validate()
            .map_err(|e| self.invalid("scenario.estimators", e))?;
        Ok(config)
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        let entry = self.required("data.path")?;
        let path = PathBuf::from(&entry.value);
        Ok(if path.is_absolute() { path } else { self.base_dir.join(path) })
    }

    pub fn n_classes(&self) -> Result<usize> {
        let g: usize = self.get_or("data.n_classes", 2)?;
        if g < 2 {
            return Err(self.invalid("data.n_classes", "must be at least 2"));
        }
        Ok(g)
    }

    pub fn n_mc(&self) -> Result<usize> {
        let n_mc: usize = self.get_required("info.n_mc")?;
        if n_mc < MIN_MC_SAMPLES {
            return Err(self.invalid("info.n_mc", format!("must be at least {MIN_MC_SAMPLES}")));
        }
        Ok(n_mc)
    }
}
