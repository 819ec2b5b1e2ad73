//! Crate-wide error type.

use thiserror::Error;

/// Why a raw stream was refused by the preprocessing pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum RejectReason {
    /// Concurrent wear time below the minimum (hours worn, hours required).
    InsufficientWear { wear_hours: f64, required_hours: f64 },
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::InsufficientWear { wear_hours, required_hours } => write!(
                f,
                "insufficient wear: {wear_hours:.1} h worn, {required_hours:.1} h required"
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation. Names both shapes.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    /// A precondition stated by an operation's contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A participant stream was rejected during preprocessing.
    #[error("stream rejected: {0}")]
    Rejected(RejectReason),

    /// Training produced a non-finite loss.
    #[error("non-finite loss in {phase} at epoch {epoch}, batch {batch} (lr={lr})")]
    NonFiniteLoss { phase: &'static str, epoch: usize, batch: usize, lr: f64 },

    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
