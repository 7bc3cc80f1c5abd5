use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid action id {0}")]
    InvalidAction(usize),
    #[error("perturbation budget must be non-negative, got {0}")]
    NegativeEpsilon(f64),
    #[error("probability {0} outside (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("smoothing range exceeded: eps {eps} with sigma {sigma} needs more than {n} samples")]
    SmoothingRangeExceeded { eps: f64, sigma: f64, n: usize },
    #[error("training fault: {0}")]
    TrainingFault(String),
    #[error("weight file version mismatch: {0}")]
    VersionMismatch(String),
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown scenario preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
