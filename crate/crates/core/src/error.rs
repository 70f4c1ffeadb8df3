use thiserror::Error;

use crate::mdp::ActionId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid action distribution (len {len}, sum {sum}): {reason}")]
    InvalidDistribution {
        len: usize,
        sum: f64,
        reason: &'static str,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("linear program is infeasible")]
    Infeasible,

    #[error("simplex iteration limit reached after {0} pivots")]
    IterationLimit(usize),

    #[error("realizability violation: contradictory labels for action {action} at features {features:?}")]
    Realizability { features: Vec<f64>, action: ActionId },

    #[error("oracle contract violation: {0}")]
    ContractViolation(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("labeling oracle timed out with {pending} queries pending")]
    OracleTimeout { pending: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
