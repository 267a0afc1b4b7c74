//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed network or property text. `line` is 1-based when known.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape-chain violation: {0}")]
    ShapeChain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("value {value} at layer {layer}, index {index} overflows binary16")]
    HalfOverflow {
        layer: usize,
        index: String,
        value: f64,
    },

    #[error("unsupported truncation width: {0} bits")]
    UnsupportedWidth(u32),

    #[error("invalid input box: {0}")]
    InvalidBox(String),

    #[error("degenerate box: every dimension has zero width")]
    DegenerateBox,

    #[error("unknown intermediate variable x{0}")]
    UnknownVariable(usize),

    #[error("missing value for variable x{0}")]
    MissingValue(usize),

    #[error("invalid verification task: {0}")]
    InvalidTask(String),

    #[error("empty box")]
    EmptyBox,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
