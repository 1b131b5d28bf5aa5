use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("dimension too small: need d >= {need}, got d = {got}")]
    DimensionTooSmall { need: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("too few tokens: need n >= 2, got n = {n}")]
    TooFewTokens { n: usize },

    #[error("infeasible spec: {0}")]
    InfeasibleSpec(String),

    #[error("token {index} has zero norm")]
    ZeroNorm { index: usize },

    #[error("norm collapse at layer {layer}: token {token} has norm {norm:e}")]
    NormCollapse {
        layer: usize,
        token: usize,
        norm: f64,
    },

    #[error("degenerate pair ({i}, {j}): input cosine {cosine} is within 1e-12 of 1")]
    DegeneratePair { i: usize, j: usize, cosine: f64 },

    #[error("budget exceeded: {what} needs {requested}, cap is {cap}")]
    BudgetExceeded {
        what: &'static str,
        requested: usize,
        cap: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AttnError>;

pub(crate) fn invalid(msg: impl Into<String>) -> AttnError {
    AttnError::InvalidParam(msg.into())
}
