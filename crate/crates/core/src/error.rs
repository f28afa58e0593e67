use thiserror::Error;

use crate::pointcloud::Frame;

#[derive(Debug, Error)]
pub enum GecoError {
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),

    #[error("frame mismatch: expected {expected:?}, found {found:?}")]
    FrameMismatch { expected: Frame, found: Frame },

    #[error("invalid box: lo {lo:?} exceeds hi {hi:?}")]
    InvalidBox { lo: [f64; 3], hi: [f64; 3] },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("insufficient points: need {needed}, have {have}")]
    InsufficientPoints { needed: usize, have: usize },

    #[error("degenerate group: {0} members, need at least 3")]
    DegenerateGroup(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("collection failure: {0}")]
    CollectionFailure(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("freeze violation: {0}")]
    FreezeViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GecoError>;

pub(crate) fn shape_err(what: impl Into<String>) -> GecoError {
    GecoError::Shape(what.into())
}
