use thiserror::Error;

/// Errors surfaced by the estimation and release pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument supplied by the caller.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A value fell outside the declared data domain.
    #[error("domain violation: {0}")]
    Domain(String),

    /// Failure while parsing an input file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input dataset is empty or otherwise unusable for fitting.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Model fitting failed (degenerate data, missing treatment arm, ...).
    #[error("fit error: {0}")]
    Fit(String),

    /// Numerical failure (singular system, failed factorization, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// I/O failure wrapped with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Serialization / deserialization failure.
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    /// A privacy budget was already consumed according to the ledger.
    #[error("budget refused: {0}")]
    BudgetRefused(String),

    /// An empirical audit assertion failed.
    #[error("audit failure: {0}")]
    AuditFailure(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
