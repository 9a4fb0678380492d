use thiserror::Error;

use crate::qcore::DType;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid data type: {bits}-bit {}", if *signed { "signed" } else { "unsigned" })]
    InvalidDType { bits: u32, signed: bool },

    #[error("non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("element {index} = {value} outside [{min}, {max}]")]
    OutOfRange { index: usize, value: i64, min: i64, max: i64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("data type mismatch: expected {expected}, got {got}")]
    DTypeMismatch { expected: DType, got: DType },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("direction vector has zero l1 norm (channel {channel})")]
    ZeroDirection { channel: usize },

    #[error("exhaustive search over K={k} inputs of {bits} bits exceeds the search budget; use the sign-aligned worst case instead")]
    SearchBudget { k: usize, bits: u32 },

    #[error("invalid accumulator width {0}: need at least 2 bits and at most 64")]
    InvalidAccumulator(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("model: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
