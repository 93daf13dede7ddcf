use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown preset `{0}` (expected example1, example2, example3 or sse_vs_qme)")]
    UnknownPreset(String),

    #[error("band quadrature did not converge at tau = {tau}: error estimate {estimate:.3e}")]
    InsufficientQuadrature { tau: f64, estimate: f64 },

    #[error("kernel matrix is not positive semidefinite: eigenvalue {min_eigenvalue:.3e} below -{tolerance:.3e}")]
    KernelNotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("grid too coarse: dx = {dx:.4e} but the state needs dx < {required:.4e}")]
    GridTooCoarse { dx: f64, required: f64 },

    #[error("numerical blow-up (NaN/Inf) at step {step}")]
    NumericalBlowup { step: usize },

    #[error("dissipator horizon integral did not converge: {0}")]
    HorizonNotConverged(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("state has zero total norm")]
    ZeroNorm,

    #[error("{aborted} of {total} trajectories aborted (more than 1%)")]
    TooManyAborts { aborted: usize, total: usize },

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::UnknownPreset(_)
            | Error::GridTooCoarse { .. }
            | Error::DimensionMismatch { .. }
            | Error::EmptyInput(_)
            | Error::Json(_) => 2,
            Error::Io { .. } => 4,
            _ => 3,
        }
    }
}

impl From<ndarray_linalg::error::LinalgError> for Error {
    fn from(e: ndarray_linalg::error::LinalgError) -> Self {
        Error::Linalg(e.to_string())
    }
}
