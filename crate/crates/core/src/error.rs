use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RvaeError>;

#[derive(Debug, Error)]
pub enum RvaeError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl RvaeError {
    pub fn contract(msg: impl Into<String>) -> Self {
        RvaeError::Contract(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        RvaeError::Numerical(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        RvaeError::Format(msg.into())
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(RvaeError::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
