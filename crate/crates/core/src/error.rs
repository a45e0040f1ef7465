use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix has numerical rank {rank}, expected {expected}")]
    RankDeficient { rank: usize, expected: usize },

    #[error("trajectory of length {len} is shorter than window depth {depth}")]
    HorizonTooShort { len: usize, depth: usize },

    #[error("Hankel matrix has {columns} columns, need at least {needed}")]
    InsufficientColumns { columns: usize, needed: usize },

    #[error("observability rank stalled at {achieved} < {n_x}")]
    NotDetectable { achieved: usize, n_x: usize },

    #[error("could not bracket the multiplier: d({lambda_hi:e}) = {distance} > rho = {rho}")]
    BracketFailure { lambda_hi: f64, distance: f64, rho: f64 },

    #[error("step size {alpha} violates 0 < alpha < 1/(1+gamma) = {bound}")]
    InvalidStepSize { alpha: f64, bound: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("excitation failed to produce rank {expected} after {attempts} attempts (last rank {rank})")]
    ExcitationFailed {
        expected: usize,
        rank: usize,
        attempts: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
