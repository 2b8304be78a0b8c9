use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("budget error: k_i = {k_i} must lie in [1, {k_full}]")]
    Budget { k_i: usize, k_full: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("client {client_id} diverged at step {step}: loss = {loss}")]
    Divergence {
        client_id: usize,
        step: u64,
        loss: f64,
    },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("integrity error at byte offset {offset}: {message}")]
    Integrity { offset: u64, message: String },

    #[error("unsupported checkpoint version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 I/O, 4 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Io { .. } | Error::Csv(_) | Error::Json(_) | Error::NotFound(_) => 3,
            Error::Integrity { .. } | Error::UnsupportedVersion { .. } => 3,
            Error::Numeric(_) | Error::Divergence { .. } => 4,
            Error::Dimension { .. } | Error::Domain(_) | Error::Budget { .. } => 1,
        }
    }
}
