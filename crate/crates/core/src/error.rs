//! Crate-wide error type.
//!
//! Variants map onto the failure classes the CLI reports through exit codes:
//! config errors, numerical failures and pretraining failures each get their
//! own variant so the binary can translate them without string matching.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes while wiring graph nodes.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated an operation's contract (bad argument, missing loss,
    /// out-of-order task, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value showed up where the computation requires finite
    /// numbers (forward pass, gradients, optimizer updates).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Encoder pretraining finished below the required zero-shot bar.
    #[error("pretraining failure: {0}")]
    Pretraining(String),

    /// Invalid experiment configuration; the message names the field.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint or dataset container.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
