use thiserror::Error;

/// Errors raised by model construction, lowering and the solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("probability at index {index} is not strictly positive ({value})")]
    NonPositiveProb { index: usize, value: f64 },

    #[error("probabilities sum to {sum}, expected 1")]
    ProbSumMismatch { sum: f64 },

    #[error("points {first} and {second} coincide")]
    DuplicatePoint { first: usize, second: usize },

    #[error("empty support")]
    EmptySupport,

    #[error("scenario {index} of the other marginal is not in the base support")]
    SupportViolation { index: usize },

    #[error("unsupported density `{0}`")]
    UnsupportedDensity(String),

    #[error("alignment error: {0}")]
    AlignmentError(String),

    #[error("invalid risk spec: {0}")]
    InvalidSpec(String),

    #[error("invalid CVaR level {0}, expected a value in (0, 1]")]
    InvalidAlpha(f64),

    #[error("loss evaluation failed: {0}")]
    LossEvalError(String),

    #[error("outer risk `{0}` is not supported by the dual solver")]
    UnsupportedOuter(String),

    #[error("anchor product of {size} tuples exceeds the cap of {cap}")]
    AnchorBudgetExceeded { size: u128, cap: u64 },

    #[error("operation requires exactly one constraint, instance has {0}")]
    NotSingleConstraint(usize),

    #[error("the dual function is unbounded above (primal infeasible)")]
    DualUnbounded,

    #[error("policy enumeration needs {needed} evaluations, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u64 },

    #[error("lambda grid supports at most 2 constraints, instance has {0}")]
    GridDimensionExceeded(usize),

    #[error("not supported: {0}")]
    NotSupported(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
