use acrkn_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("corrupted belief: {0}")]
    CorruptBelief(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: line {line}: {detail}")]
    Csv {
        path: String,
        line: u64,
        detail: String,
    },
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
