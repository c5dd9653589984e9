use thiserror::Error;

/// Errors raised by the symbolic and numerical layers.
#[derive(Error, Debug)]
pub enum Error {
    #[error("operator has no roots: {0}")]
    NoRoots(String),

    #[error("zero operator has no Green's function")]
    ZeroOperator,

    #[error("evaluation at t={t} hits a Dirac at {location} (guard {guard})")]
    DiracHit { t: f64, location: f64, guard: f64 },

    #[error("matrix operator is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("non-invertible MDO: det(L) = 0")]
    NonInvertible,

    #[error("Green's matrix verification failed: {0}")]
    VerificationFailed(String),

    #[error("nullspace extraction failed: {0}")]
    NullspaceExtraction(String),

    #[error("Assumption 6 violated: Q is rank-deficient (rank {rank} < {expected})")]
    RankDeficient { rank: usize, expected: usize },

    #[error("inadmissible measurement functional #{index}: {detail}")]
    Inadmissible { index: usize, detail: String },

    #[error("quadrature did not reach the requested tolerance: {0}")]
    QuadratureFailure(String),

    #[error("bisection did not converge: {0}")]
    BisectionFailure(String),

    #[error("solver diverged: objective is not finite at iteration {0}")]
    Divergence(usize),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("invalid problem file: {0}")]
    InvalidProblem(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
