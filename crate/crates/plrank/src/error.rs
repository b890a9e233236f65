use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left}, right is {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("empty candidate set: {0}")]
    EmptyCandidates(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate rank: requested {requested} components but covariance rank is {rank}")]
    DegenerateRank { requested: usize, rank: usize },

    #[error("insufficient tokens: got {got}, need at least {need}")]
    InsufficientTokens { got: usize, need: usize },

    #[error("undefined angle: {0}")]
    UndefinedAngle(&'static str),

    #[error("non-finite value in {context}: parameter `{name}`")]
    NonFinite { context: &'static str, name: String },

    #[error("combinatorial guard: enumeration refused for n = {0} (limit 6)")]
    EnumerationGuard(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("cache format error: {0}")]
    CacheFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
