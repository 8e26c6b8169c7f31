use thiserror::Error;

use crate::dsl::{ConfigError, EvalError, ParseError};

/// Errors raised by the geometric operations.
#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point {point:?} lies outside the domain")]
    OutsideDomain { point: Vec<f64> },

    #[error("metric is not positive definite at {point:?}")]
    NotPositiveDefinite { point: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("path left the domain at arclength {arclength}")]
    PathExited { arclength: f64 },

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error("scene: {0}")]
    Config(#[from] ConfigError),
}

impl GeomError {
    pub fn outside(x: &[f64]) -> Self {
        GeomError::OutsideDomain { point: x.to_vec() }
    }
}

pub type Result<T, E = GeomError> = std::result::Result<T, E>;
