use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate softmax row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("sequencing error: segment {segment} is not after high-water mark {high_water}")]
    Sequencing { segment: usize, high_water: usize },

    #[error("task error: {0}")]
    Spec(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
