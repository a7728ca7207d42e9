use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up with the recorded operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric operation was applied outside its domain (log of a
    /// non-positive value, division by zero).
    #[error("domain error at node {node} ({op}): {detail}")]
    Domain { node: usize, op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration or hyperparameter.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate logits at position {position}: every coordinate is at the floor")]
    DegenerateLogits { position: usize },

    #[error("zero probability assigned to the realized token at position {position}")]
    InfiniteLoss { position: usize },

    #[error("infinite divergence: q is zero where p = {p}")]
    InfiniteDivergence { p: f64 },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("model emitted an invalid distribution at position {position} of {sequence:?}")]
    InvalidDistribution { sequence: Vec<u8>, position: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
