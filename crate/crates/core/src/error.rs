use thiserror::Error;

/// Errors raised by the sampler, estimators and training loops.
#[derive(Debug, Error)]
pub enum Error {
    #[error("all log-weights are -inf; the particle population has collapsed")]
    DegenerateWeights,

    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("chain {chain} diverged (non-finite state at step {step})")]
    Divergence { chain: usize, step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Returns `Err(NonFinite)` for the first non-finite entry of `values`.
pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}
