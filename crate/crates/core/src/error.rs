use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("natural parameter {eta} outside the {family} domain")]
    NaturalDomain { family: &'static str, eta: f64 },

    #[error("response {y} outside the {family} support (row {row})")]
    Support {
        family: &'static str,
        y: f64,
        row: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("group {group}: {reason}")]
    Group { group: String, reason: String },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: cannot read `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("no feasible starting point: {0}")]
    Infeasible(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the data or parameter values rather than
    /// by I/O or malformed input.
    pub fn is_domain(&self) -> bool {
        matches!(
            self,
            Error::NaturalDomain { .. }
                | Error::Support { .. }
                | Error::Group { .. }
                | Error::NotPositiveDefinite(_)
                | Error::Infeasible(_)
                | Error::Precondition(_)
                | Error::InvalidArgument(_)
        )
    }
}
