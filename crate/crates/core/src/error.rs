use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("numerical abort at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e}): {reason}")]
    NumericalAbort {
        step: usize,
        lr: f64,
        grad_norm: f64,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
