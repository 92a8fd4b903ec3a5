use std::fmt;

use thiserror::Error;

/// A rejected input row. Loading continues past these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Input { line: u64, message: String },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("no eligible guard relay (all selection weights are zero)")]
    NoEligibleGuard,
    #[error("zero total guard bandwidth")]
    ZeroBandwidth,
    #[error(transparent)]
    Lp(#[from] crate::lp::LpError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
