//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor operation received operands with incompatible shapes.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A computation produced NaN or Inf (checked in debug builds).
    #[error("{context}: non-finite value")]
    NonFinite { context: String },

    /// `backward` was called on a non-scalar value.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// Malformed or inconsistent input data (datasets, embedding tables).
    #[error("data error{}: {msg}", .line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Data { msg: String, line: Option<usize> },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Model or store file could not be written or read back intact.
    #[error("persistence error: {0}")]
    Persist(String),

    /// Generation backend failure (network, credentials, canned-response miss).
    #[error("backend error: {0}")]
    Backend(String),

    /// Training aborted (for example a NaN loss).
    #[error("training error: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data {
            msg: msg.into(),
            line: None,
        }
    }

    pub fn data_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Data {
            msg: msg.into(),
            line: Some(line),
        }
    }
}
