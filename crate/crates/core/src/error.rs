use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pattern set is empty")]
    EmptyPatterns,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("time {t} outside the admissible range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-finite loss {loss} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("non-finite divergence: {0}")]
    NonFiniteKl(String),

    #[error("training diverged at epoch {epoch}: loss {loss} stayed above 10x the initial loss {initial} for 50 consecutive epochs")]
    Diverged { epoch: usize, loss: f64, initial: f64 },

    #[error("quadrature did not converge: error estimate {estimate:e} at {nodes} nodes")]
    QuadratureNonConvergence { estimate: f64, nodes: usize },

    #[error("matrix is not symmetric positive-definite: {0}")]
    NotPositiveDefinite(String),

    #[error("could not draw {needed} pairwise-distinct sequences within {attempts} attempts")]
    DisjointnessExhausted { needed: usize, attempts: usize },

    #[error("insufficient text: {found} usable characters, need at least {needed}")]
    InsufficientText { found: usize, needed: usize },

    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },

    #[error("truncated checkpoint: expected {expected} bytes of parameters, found {found}")]
    TruncatedCheckpoint { expected: usize, found: usize },

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
