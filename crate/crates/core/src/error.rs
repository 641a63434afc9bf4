use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("weights carry no mass")]
    AllZero,
    #[error("negative weight {value} at cell {index}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("smoothing constant must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("operation requires a {expected}-dimensional grid, got {got}")]
    WrongDimensionality { expected: usize, got: usize },
    #[error("transport problem infeasible: {0}")]
    FlowInfeasible(String),
    #[error("infeasible constraint: {0}")]
    InfeasibleConstraint(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("ensemble needs at least two members to estimate epistemic spread")]
    SingleMember,
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("scan plan has no evaluation points")]
    EmptyScanPlan,
    #[error("initial distribution is unsafe (h = {0})")]
    UnsafeInitialDistribution(f64),
    #[error("objective diverged at epoch {epoch}: {value}")]
    DivergedObjective { epoch: usize, value: f64 },
    #[error("model evaluation failed: {0}")]
    ModelEvalFailure(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
