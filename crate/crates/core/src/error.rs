use thiserror::Error;

/// Errors raised by the reachability engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent or unsupported configuration (dimension mismatch, bad
    /// parameters, unsupported controller arm for the requested mode).
    #[error("configuration error: {0}")]
    Config(String),

    /// A runtime argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Malformed binary input.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// The solver produced a NaN or infinity.
    #[error("non-finite value at step {step}, cell {cell}")]
    NonFinite { step: usize, cell: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
