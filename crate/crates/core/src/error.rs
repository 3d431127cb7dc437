use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies behind the camera (camera-frame z = {z:e})")]
    PointBehindCamera { z: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("non-finite residual at index {index}")]
    NonFiniteResidual { index: usize },

    #[error("initialization failed: {0}")]
    InitializationFailed(String),

    #[error("no visible ground-truth joints")]
    NoVisibleJoints,

    #[error("rejection budget exceeded after {attempts} placement attempts")]
    RejectionBudgetExceeded { attempts: usize },

    #[error("missing ground truth for {0}")]
    MissingGroundTruth(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error("grid format: {0}")]
    GridFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by malformed input rather than by a solver.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Schema { .. }
                | Error::InvalidInput(_)
                | Error::GridFormat(_)
                | Error::Io { .. }
                | Error::LengthMismatch { .. }
        )
    }
}
