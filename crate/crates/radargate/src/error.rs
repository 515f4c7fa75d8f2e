use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A scalar or structural argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Config file rejected; every offending field is listed.
    #[error("invalid config:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    /// Checkpoint file rejected at a specific byte offset.
    #[error("checkpoint error at byte {offset}: {reason}")]
    Checkpoint { offset: u64, reason: String },

    /// Gate selection is not stable under the requested perturbation size.
    #[error("unstable configuration: {0}")]
    Unstable(String),

    /// A training run aborted mid-stream.
    #[error("training aborted at step {step}: {reason}")]
    TrainAborted { step: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
