//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An index refers past the end of a collection.
    #[error("index out of range: {0}")]
    Index(String),

    /// Two tensors or vectors that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A conditioning label set is empty or refers to an unknown class.
    #[error("invalid condition: {0}")]
    Condition(String),

    /// Dataset contents violate an invariant (bad label, empty set, ...).
    #[error("bad data: {0}")]
    Data(String),

    /// Threshold calibration cannot proceed (e.g. no scores to rank).
    #[error("calibration error: {0}")]
    Calibration(String),

    /// A serialized artifact does not match its expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// A computation produced NaN or another unusable value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API was called with state it documents as unacceptable.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Text input could not be parsed at all.
    #[error("parse error: {0}")]
    Parse(String),

    /// Parsed input carries values that fail cross-field checks.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
