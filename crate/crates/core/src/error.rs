use alloc::string::String;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("invalid bounds: lower {lower} > upper {upper}")]
    InvalidBounds { lower: f64, upper: f64 },
    #[error("integration produced a non-finite state at stage {stage}")]
    IntegrationFailure { stage: &'static str },
    #[error("numerical failure in solver: {what} (iteration {iteration})")]
    NumericalFailure { what: String, iteration: usize },
    #[error("grid oracle limited to {max} variables, problem has {got}")]
    GridTooLarge { max: usize, got: usize },
    #[error("invalid constant {name}: {value}")]
    InvalidConstant { name: &'static str, value: f64 },
    #[error("controller gain must be positive, got {gain}")]
    ControllabilityGain { gain: f64 },
    #[error("controllability budget violated: disturbance/control cost ratio {ratio} >= 1")]
    UncontrollableBudget { ratio: f64 },
    #[error("infeasible constraint boxes: {context}")]
    InfeasibleBox { context: &'static str },
    #[error("empty window buffer")]
    EmptyBuffer,
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;
