use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty distribution: {0}")]
    EmptyDistribution(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("evaluator failed: {0}")]
    Evaluator(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short name used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::EmptyDistribution(_) => "empty_distribution",
            Error::Format(_) => "format",
            Error::InvalidConfig(_) => "invalid_config",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::InvalidDistribution(_) => "invalid_distribution",
            Error::NonFinite(_) => "non_finite",
            Error::Evaluator(_) => "evaluator",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
