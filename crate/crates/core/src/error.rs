use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("spectrum has no eigenvalue above the clipping threshold")]
    ZeroSpectrum,
    #[error("trace must be strictly positive")]
    ZeroTrace,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),
    #[error("matrix is singular; ridge-shift it first")]
    SingularInput,
    #[error("block partitions are incompatible: {0}")]
    PartitionMismatch(String),
    #[error("dimension {dim} exceeds the cap of {cap}")]
    DimTooLarge { dim: usize, cap: usize },
    #[error("problem of size {size} exceeds the cap of {cap}")]
    TooLarge { size: usize, cap: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("forward trace does not belong to this model: {0}")]
    TraceMismatch(String),
    #[error("layer {layer} is not a valid hidden expert layer (model has {hidden})")]
    BadLayer { layer: usize, hidden: usize },
    #[error("step size {0} is outside [0, 1/2]")]
    EtaOutOfRange(f64),
    #[error("placement expects {expected} feature matrices, got {got}")]
    PlacementMismatch { expected: usize, got: usize },
    #[error("block has zero norm")]
    ZeroBlock,
    #[error("input list is empty")]
    EmptyInput,
    #[error("correlation undefined: series has zero variance")]
    DegenerateVariance,
    #[error("pairwise routing metrics need top_k >= 2")]
    UndefinedForK1,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
