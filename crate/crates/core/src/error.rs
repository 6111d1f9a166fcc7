use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("unsupported kernel: {0}")]
    UnsupportedKernel(String),
    #[error("gradient tape does not match this network or batch")]
    TapeMismatch,
    #[error("loss became non-finite at iteration {iteration}")]
    DivergedLoss { iteration: usize },
    #[error("empty data")]
    EmptyData,
    #[error("Laplace iterations did not converge")]
    NonConvergence,
    #[error("Laplace state is not converged")]
    StateNotConverged,
    #[error("address `{0}` used twice in one execution")]
    AddressCollision(String),
    #[error("no pinned value for sample site `{0}`")]
    MissingChoice(String),
    #[error("all importance weights are zero")]
    AllWeightsZero,
    #[error("patient has no visits")]
    EmptyPatient,
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("insufficient patients: need {needed}, have {available}")]
    InsufficientPatients { needed: usize, available: usize },
    #[error("unknown reference: {0}")]
    UnknownReference(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 for configuration, input and IO problems, 3 for
    /// numerical failures, 4 for references to missing data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::DivergedLoss { .. }
            | Error::NonConvergence
            | Error::StateNotConverged
            | Error::AllWeightsZero
            | Error::TapeMismatch => 3,
            Error::UnknownReference(_) | Error::EmptyPatient => 4,
            _ => 2,
        }
    }
}
