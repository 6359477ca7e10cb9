use thiserror::Error;

/// Errors produced by the pose engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate transform: {0}")]
    DegenerateTransform(String),
    #[error("degenerate correspondence: {0}")]
    DegenerateCorrespondence(String),
    #[error("no candidates: {0}")]
    NoCandidates(String),
    #[error("no correspondences to estimate from")]
    NoCorrespondences,
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("unreliable in-plane angle: (cos, sin) norm {0:e} below 1e-6")]
    UnreliableAngle(f64),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("point {index} projects with non-positive depth {depth}")]
    BehindCamera { index: usize, depth: f64 },
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("truncated stream at byte offset {offset}: expected {expected} more bytes")]
    Truncated { offset: u64, expected: usize },
    #[error("onboarding failed for template {template}: {message}")]
    Onboarding { template: String, message: String },
    #[error("estimation failed for all candidates: {}", .diagnostics.join("; "))]
    EstimationFailed { diagnostics: Vec<String> },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
