use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("state mismatch: {0}")]
    State(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite objective at coordinate {coordinate} (value {value})")]
    Evaluation { coordinate: usize, value: f64 },

    #[error("shard boundary {boundary} is not aligned to chunk length {chunk}")]
    Alignment { boundary: usize, chunk: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
