use std::path::PathBuf;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("mode mismatch: {0}")]
    ModeMismatch(&'static str),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("no conditional stored for context {0}")]
    MissingContext(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unknown task family `{0}`")]
    UnknownFamily(String),
    #[error("prefix has zero probability under the joint model")]
    ZeroProbabilityPrefix,
    #[error("undefined objective: {0}")]
    UndefinedObjective(String),
    #[error("unknown series `{0}`")]
    UnknownSeries(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
