use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("covariance is not positive definite: smallest eigenvalue {min_eigenvalue:e} is below {floor:e}")]
    NotPositiveDefinite { min_eigenvalue: f64, floor: f64 },

    #[error("invalid mixture parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("degenerate component {component}: total responsibility {total:e} below 1e-8")]
    DegenerateComponent { component: usize, total: f64 },

    #[error("mechanism Newton step failed after {halvings} halvings (gradient sup-norm {gradient_norm:e}) at xi = {iterate:?}")]
    MechanismStepFailure {
        iterate: Vec<f64>,
        gradient_norm: f64,
        halvings: usize,
    },

    #[error("non-finite score in coordinate {coordinate}")]
    NonFiniteScore { coordinate: usize },

    #[error("Monte-Carlo sample size {n_mc} is below the minimum {min}")]
    TooFewSamples { n_mc: usize, min: usize },

    #[error("a missingness mechanism is required for {0}")]
    MissingMechanism(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
