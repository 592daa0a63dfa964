//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("bias key (layer {layer}, head {head}) out of range for {layers} layers x {heads} heads")]
    BiasKeyOutOfRange {
        layer: usize,
        head: usize,
        layers: usize,
        heads: usize,
    },

    #[error("training diverged: loss became non-finite at step {step}")]
    TrainingDiverged { step: usize },

    #[error("degenerate probe data: {0}")]
    DegenerateData(String),

    #[error("rejected input at index {index}: {reason}")]
    RejectedInput { index: usize, reason: String },

    #[error("model fingerprint mismatch: expected {expected}, got {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
