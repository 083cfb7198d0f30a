//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file or byte stream did not match the expected schema.
    #[error("parse error: {0}")]
    Parse(String),

    /// Structurally well-formed input that violates a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A lookup referenced an unknown dataset, candidate or policy.
    #[error("unknown {kind} id: {id}")]
    UnknownId { kind: &'static str, id: String },

    /// A budget query below the first recorded checkpoint of a curve.
    #[error("no result yet: budget {budget} below first checkpoint {first}")]
    NoResultYet { budget: u64, first: u64 },

    /// Exhaustive enumeration would exceed the configured cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
