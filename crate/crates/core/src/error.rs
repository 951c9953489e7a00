use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions, invalid spaces, malformed configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite parameters or intermediate values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A closed form evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The parameter update produced a non-finite iterate.
    #[error("divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    /// Trajectory enumeration would exceed the explosion guard.
    #[error("enumeration refused: {paths:.3e} paths exceeds the limit of {limit:.0e}")]
    EnumerationTooLarge { paths: f64, limit: f64 },

    /// Controller/learner protocol violation.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed wire frame.
    #[error("decode error: {0}")]
    Decode(String),

    #[error("transport error: {0}")]
    Transport(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
