use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiceError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty batch")]
    EmptyBatch,

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("behavior policy has zero probability for action {action} at state {state} where the target policy is positive")]
    UnsupportedAction { state: usize, action: usize },

    #[error("non-finite value at step {step} (nu param norm {nu_norm:.3e}, zeta param norm {zeta_norm:.3e})")]
    NonFinite {
        step: usize,
        nu_norm: f64,
        zeta_norm: f64,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DiceError>;

pub(crate) fn parse_err(line: usize, msg: impl Into<String>) -> DiceError {
    DiceError::Parse {
        line,
        msg: msg.into(),
    }
}
