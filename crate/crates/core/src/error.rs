use thiserror::Error;

/// Failures while reading an instance description.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("expression '{source_text}', position {position}: {message}")]
    Expression {
        source_text: String,
        position: usize,
        message: String,
    },

    #[error("syntax error: {0}")]
    Syntax(String),

    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
}

impl ParseError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ParseError::Field {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("diffusion matrix is not uniformly elliptic: minimum eigenvalue {theta:.3e} at x = {point:?}, state {state}")]
    NonElliptic {
        theta: f64,
        point: Vec<f64>,
        state: usize,
    },

    #[error("penalty parameter must be positive, got {0}")]
    InvalidEpsilon(f64),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("monotone stencil lost at node {node} (regime {regime}, state {state}): {detail}")]
    MonotonicityLoss {
        regime: usize,
        state: usize,
        node: usize,
        detail: String,
    },

    #[error(
        "linear solve failed after {iterations} iterations (relative residual {residual:.3e})"
    )]
    LinearSolveFailure { iterations: usize, residual: f64 },

    #[error("continuation stalled at stage {stage}: gaps {gaps:?}")]
    StalledContinuation { stage: usize, gaps: Vec<f64> },

    #[error("point {point:?} lies outside the closed domain")]
    OutOfDomain { point: Vec<f64> },

    #[error("path {path} left the bounding box at t = {time} (x = {point:?})")]
    StepExplosion {
        path: u64,
        time: f64,
        point: Vec<f64>,
    },

    #[error("diffusion matrix 2a is not positive definite at x = {point:?}, state {state}")]
    NotPositiveDefinite { point: Vec<f64>, state: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
