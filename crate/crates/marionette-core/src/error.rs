//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Bad or inconsistent configuration (missing splits, unknown variants, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Training aborted mid-run (non-finite loss and similar).
    #[error("runtime abort: {0}")]
    Abort(String),
    /// A file could not be parsed as the documented schema.
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), msg: msg.into() }
    }
}
