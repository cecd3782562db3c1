//! Error type shared across the crate.

use alloc::string::String;
use core::fmt;

/// Errors produced by graph compilation, model assembly and training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoreError {
    /// Input data violates a structural invariant (bad index, empty span,
    /// malformed vocabulary). The message names the offending field/edge.
    Validation(String),
    /// Shapes, dimensions or flags are inconsistent with the configuration.
    Config(String),
    /// A parameter path was requested that the store does not contain.
    MissingParameter(String),
    /// A non-finite value surfaced where the pipeline requires finite math.
    Numeric(String),
}

impl CoreError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CoreError::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CoreError::Numeric(msg.into())
    }
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Validation(msg) => write!(f, "validation error: {msg}"),
            CoreError::Config(msg) => write!(f, "configuration error: {msg}"),
            CoreError::MissingParameter(name) => write!(f, "missing parameter '{name}'"),
            CoreError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for CoreError {}
