use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("observation {obs} has zero likelihood under action {action}")]
    ZeroLikelihood { action: usize, obs: usize },

    #[error("KL divergence unsupported: p has mass at index {index} where q has none")]
    Unsupported { index: usize },

    #[error("ambiguity sampler exhausted {attempts} attempts on {kernel} row (state {state}, action {action})")]
    SamplingExhausted {
        kernel: &'static str,
        state: usize,
        action: usize,
        attempts: usize,
    },

    #[error("belief solver exceeded node budget of {budget} memo entries")]
    BudgetExceeded { budget: usize },

    #[error("matrix is ill-conditioned (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("training diverged at step {step}: loss {loss:e} vs initial {initial:e}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("policy returned action {action} outside 0..{num_actions}")]
    InvalidAction { action: i64, num_actions: usize },

    #[error("optimal return {value:e} is not positive; the gap ratio is undefined")]
    DegenerateOptimum { value: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("external policy timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidModel(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
