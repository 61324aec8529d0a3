use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("action {action} is not allowed at batch index {index}")]
    MaskViolation { index: usize, action: usize },

    #[error("action index {action} out of range for {n_actions} actions (batch index {index})")]
    ActionOutOfRange { index: usize, action: usize, n_actions: usize },

    #[error("state at batch index {index} is the initial state and has no parents")]
    BackwardFromInitial { index: usize },

    #[error("state at batch index {index} is the sink state")]
    SinkState { index: usize },

    #[error("state at batch index {index} is not a valid state: {reason}")]
    InvalidState { index: usize, reason: String },

    #[error("mask row {row} has no allowed entry")]
    EmptyMask { row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("environment has {n_states} states, above the enumeration bound {limit}")]
    EnumerationBound { n_states: u128, limit: usize },

    #[error("environment does not support state enumeration")]
    NotEnumerable,

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("batch of {got} trajectories is too small, need at least {need}")]
    BatchTooSmall { got: usize, need: usize },

    #[error("trajectory {index} has length 0")]
    EmptyTrajectory { index: usize },

    #[error("incompatible configuration: {0}")]
    Incompatible(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
