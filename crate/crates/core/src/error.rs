use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimators, simulator, training loops and file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met (shape mismatch, empty input, ...).
    #[error("{op}: contract violation: {reason}")]
    Contract { op: &'static str, reason: String },

    /// A computation produced or received a non-finite or underflowing number.
    #[error("{op}: numeric error: {reason}")]
    Numeric { op: &'static str, reason: String },

    /// Every importance weight is zero, so a self-normalized quantity is undefined.
    #[error("{op}: degenerate support: the importance weights sum to zero")]
    DegenerateSupport { op: &'static str },

    /// The denominator of a closed-form baseline vanished.
    #[error("{op}: degenerate baseline: denominator {denominator:e} is too close to zero")]
    DegenerateBaseline { op: &'static str, denominator: f64 },

    /// A logged row has a non-positive propensity, which breaks the common-support assumption.
    #[error("row {row}: common support violated: propensity {propensity} must be > 0")]
    CommonSupport { row: usize, propensity: f64 },

    /// A data file could not be parsed.
    #[error("{path}: row {row}, column `{column}`: {reason}")]
    Parse {
        path: String,
        row: usize,
        column: String,
        reason: String,
    },

    /// A data file's header is missing a required column or has an unexpected one.
    #[error("{path}: header, column `{column}`: {reason}")]
    Header {
        path: String,
        column: String,
        reason: String,
    },

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Contract {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied configuration or input files
    /// rather than by a numerical failure during a run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::Header { .. } | Error::CommonSupport { .. } | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
