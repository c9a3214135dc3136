//! Error type shared by every module of the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data of the wrong shape or range.
    #[error("input error: {0}")]
    Input(String),

    /// Operation called in a state that does not allow it (e.g. backward
    /// without a recorded forward pass, mismatched parameter sets).
    #[error("state error: {0}")]
    State(String),

    /// A watermark key does not resolve against the model it is applied to.
    #[error("key error: {0}")]
    Key(String),

    /// Invalid configuration or manifest.
    #[error("config error: {0}")]
    Config(String),

    /// More signature bits were requested than the parameter pool can hold.
    #[error("capacity error: requested {requested} bits, pool holds {available}")]
    Capacity { requested: usize, available: usize },

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn key(msg: impl Into<String>) -> Self {
        Error::Key(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
