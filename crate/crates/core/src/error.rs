use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error("eigensolver did not converge (worst residual {worst_residual:e})")]
    ConvergenceFailure { worst_residual: f64, residuals: Vec<f64> },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite state at step {step}")]
    UnstableStep { step: usize },
    #[error("penalty system is not positive definite (mode {mode})")]
    SingularSystem { mode: usize },
    #[error("diffusion step {step} outside [1, {max}]")]
    StepOutOfRange { step: usize, max: usize },
    #[error("negative loss value {0}")]
    NegativeLoss(f64),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("input vector is not unit norm (norm {0})")]
    NonUnitInput(f64),
    #[error("degenerate features: row {row} has zero norm")]
    DegenerateFeatures { row: usize },
    #[error("label {0} has no members")]
    EmptyLabel(usize),
    #[error("region {0} has no vertices")]
    EmptyRegion(usize),
    #[error("covariance matrix is singular")]
    SingularCovariance,
    #[error("inconsistent input: {0}")]
    InconsistentInput(String),
    #[error("empty group")]
    EmptyGroup,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("requested {requested} items but only {available} available")]
    KTooLarge { requested: usize, available: usize },
    #[error("series of length {0} is too short")]
    TooShortSeries(usize),
    #[error("non-finite state at rollout step {step}")]
    NonFiniteState { step: usize },
    #[error("target region {target} outside [1, {regions}]")]
    TargetOutOfRange { target: usize, regions: usize },
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("empty list")]
    EmptyList,
    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("bad magic or truncated header")]
    MagicMismatch,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { location: location.into(), message: message.into() }
    }

    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) | InfeasibleConfig(_) | Json(_) => ErrorClass::Config,
            ConvergenceFailure { .. }
            | UnstableStep { .. }
            | SingularSystem { .. }
            | NegativeLoss(_)
            | NonFiniteGradient
            | SingularCovariance
            | NonFiniteState { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
