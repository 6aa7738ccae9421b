use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("row {0} has zero norm")]
    DegenerateRow(usize),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("views do not overlap")]
    NoOverlap,
    #[error("unknown sample index {0}")]
    UnknownSample(usize),
    #[error("no positives at threshold {0}")]
    NoPositives(f64),
    #[error("scene generation failed: {0}")]
    GenerationError(String),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("optimizer ended infeasible (max violation {violation:e})")]
    InfeasibleResult { violation: f64 },
    #[error("batch of {0} scenes is too small for the enabled losses")]
    InsufficientBatch(usize),
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("config error: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> LabError {
    LabError::ShapeError(msg.into())
}
