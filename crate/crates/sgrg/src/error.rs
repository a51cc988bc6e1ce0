//! Error type shared by all modules.

use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented range.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// A combinatorial or memory cap would be exceeded.
    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),

    /// A numerical tolerance cannot be met with the current settings.
    #[error("tolerance not met: {0}")]
    Tolerance(String),

    /// A hypothesis required by a map does not hold.
    #[error("hypothesis `{name}` failed: {detail}")]
    Hypothesis { name: &'static str, detail: String },

    /// A linear-algebra factorization failed.
    #[error("factorization failed: {0}")]
    Factorization(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
