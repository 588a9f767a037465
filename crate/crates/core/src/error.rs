use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(#[from] ParseError),

    #[error("data error: {0}")]
    Data(String),

    #[error("length error: {what} needs {needed} tokens but the limit is {limit}")]
    Length {
        what: String,
        needed: usize,
        limit: usize,
    },

    #[error("client error: {0}")]
    Client(String),

    #[error("pipeline error: {message}")]
    Pipeline {
        message: String,
        /// Steps that completed before the failure, in order.
        provenance: Vec<String>,
    },

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Malformed-input errors, kept distinct so callers can tell them apart.
#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("ragged row {row}: expected {expected} values, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("value {value} at index {index} lies below the declared minimum {min}")]
    BelowRange { index: usize, value: f64, min: f64 },
    #[error("dimension mismatch: data is {found_rows}x{found_cols}, geometry declares {rows}x{cols}")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("invalid number {token:?} at line {line}")]
    Number { line: usize, token: String },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("truncated input: {0}")]
    Truncated(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
