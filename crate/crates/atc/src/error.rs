//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AtcError>;

#[derive(Debug, Error)]
pub enum AtcError {
    /// Invalid configuration: bad shapes, out-of-range hyperparameters,
    /// contradictory mode/schedule combinations.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an API contract (backward on a non-scalar, writing
    /// to a frozen encoder, stepping a finished episode, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or Inf appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// The replay buffer / dataset cannot satisfy a sampling request.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Malformed or corrupt on-disk data.
    #[error("data error: {0}")]
    Data(String),

    /// Evaluation preconditions not met (dataset too small, degenerate labels).
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl AtcError {
    pub fn config(msg: impl Into<String>) -> Self {
        AtcError::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        AtcError::Contract(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        AtcError::Data(msg.into())
    }
}
