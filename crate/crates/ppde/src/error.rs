//! Crate-wide error type.
//!
//! Errors fall into three broad families that the CLI maps to exit codes:
//! configuration/validation problems (exit 2), numerical failures detected
//! mid-run (exit 3), and everything else (exit 1).

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("incompatible grids: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range (max {max})")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("path must start at the origin (|value[0]| = {0:.3e})")]
    NonzeroOrigin(f64),

    #[error("non-finite value in {context} at path {path}, step {step}")]
    NonFinite {
        context: &'static str,
        path: usize,
        step: usize,
    },

    #[error("drift control bound violated at path {path}, step {step}: |lambda| = {norm:.6} > bound {bound:.6}")]
    ControlBound {
        path: usize,
        step: usize,
        norm: f64,
        bound: f64,
    },

    #[error("ensemble has no paths")]
    EmptyEnsemble,

    #[error("operation requires measure tag {expected}, ensemble is {got}")]
    MeasureMismatch { expected: String, got: String },

    #[error("regression normal equations singular even after ridge (condition estimate {cond:.3e})")]
    SingularRegression { cond: f64 },

    #[error("functional is not adapted: evaluations at index {index} differ on paths that agree up to {index}")]
    NotAdapted { index: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("no contact strictly before the horizon (smallest envelope-obstacle gap {min_gap:.3e})")]
    NoPreHorizonContact { min_gap: f64 },

    #[error("tree depth {depth} too large (max {max})")]
    TreeDepth { depth: usize, max: usize },

    #[error("config: field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("config parse: {0}")]
    ConfigParse(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 for validation problems,
    /// 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::ConfigParse(_) | Error::Precondition(_) => 2,
            Error::NonFinite { .. }
            | Error::SingularRegression { .. }
            | Error::ControlBound { .. }
            | Error::NoPreHorizonContact { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
