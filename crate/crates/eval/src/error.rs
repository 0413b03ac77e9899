use std::path::PathBuf;

use emagate_metrics::MetricError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("query vector has zero norm")]
    DegenerateQuery,

    #[error("item {id}, {metric}: {source}")]
    Metric {
        id: String,
        metric: &'static str,
        #[source]
        source: MetricError,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Model(#[from] emagate_core::Error),
}

impl EvalError {
    /// 2 for configuration errors, 3 for everything about the inputs.
    pub fn exit_code(&self) -> u8 {
        match self {
            EvalError::Config(_) | EvalError::Model(emagate_core::Error::Parameter(_)) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
