use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mode index {index} out of range for spectrum with {modes} modes")]
    ModeOutOfRange { index: usize, modes: usize },

    #[error("point {0} lies outside the unit interval")]
    OutsideDomain(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("measure has empty support")]
    EmptySupport,

    #[error("context tags are not separated: <v{i}, v{j}> = {inner}")]
    TagsNotSeparated { i: usize, j: usize, inner: f64 },

    #[error("unsupported input: {0}")]
    Unsupported(String),

    #[error("forward cache is stale (cache epoch {cache}, model epoch {model})")]
    StaleCache { cache: u64, model: u64 },

    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),

    #[error("degenerate regression design: {0}")]
    DegenerateFit(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: usize, got: usize) -> Self {
        Error::DimensionMismatch { expected, got }
    }
}
