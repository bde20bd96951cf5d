use std::path::PathBuf;

use thiserror::Error;

/// Errors reported by the simulation, tomography and reconstruction routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported size: {what} = {value} exceeds the limit of {limit}")]
    UnsupportedSize {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The normal-equation matrix could not be factorized.
    #[error("ill-conditioned system: smallest eigenvalue {min_eigenvalue:e}")]
    Conditioning { min_eigenvalue: f64 },

    /// Every entry of a POVM row was flagged for removal.
    #[error("degenerate sparsity mask: rows {rows:?} have no free variable")]
    DegenerateMask { rows: Vec<usize> },

    #[error("model mismatch: outcome {outcome} observed with probability {probability} but predicted probability is zero")]
    ModelMismatch { outcome: usize, probability: f64 },

    #[error("undefined moment: distribution has zero mean")]
    UndefinedMoment,

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("underdetermined fit: {0} usable points, at least 3 required")]
    Underdetermined(usize),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
