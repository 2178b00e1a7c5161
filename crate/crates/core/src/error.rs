//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix shapes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is out of its legal range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A linear system was (numerically) singular.
    #[error("singular system: {context} (condition estimate {cond:.3e})")]
    Singular { context: String, cond: f64 },

    /// A metric or operation is undefined for the given input.
    #[error("undefined: {0}")]
    Undefined(String),

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),

    /// A binary file did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialisation failure for configs and sidecars.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
