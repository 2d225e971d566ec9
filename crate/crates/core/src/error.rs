use thiserror::Error;

/// Errors produced by the corrnoise toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("degenerate parameters: {0}")]
    Degenerate(String),

    #[error("ill-conditioned computation: {0}")]
    IllConditioned(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("round {round} exceeds the declared limit of {limit} rounds")]
    RoundOverflow { round: usize, limit: usize },

    #[error("invalid participation schema: {0}")]
    InvalidSchema(String),

    #[error("strategy not supported by this sensitivity method: {0}")]
    UnsupportedStrategy(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("training halted at round {round}: {eligible} eligible clients, {needed} needed")]
    Starvation {
        round: usize,
        eligible: usize,
        needed: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
