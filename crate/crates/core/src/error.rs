//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition (empty input, bad range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An inverse DFT produced significant imaginary content, which means the
    /// spectrum it was given was not conjugate-symmetric.
    #[error("non-real result: max |imag| = {max_imag:.3e} exceeds tolerance {tol:.1e}")]
    NonRealResult { max_imag: f64, tol: f64 },

    /// An adaptive process blew up (step size too large for the input).
    #[error("divergence: {quantity} reached {value:.3e}")]
    Divergence { quantity: &'static str, value: f64 },

    /// Training aborted (non-finite loss or similar unrecoverable state).
    #[error("training failed: {0}")]
    Training(String),

    /// A file did not match the expected on-disk format.
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
