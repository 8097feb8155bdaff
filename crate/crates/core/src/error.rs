use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("unknown {kind} `{id}`")]
    Lookup { kind: &'static str, id: String },

    #[error("cannot split users: {0}")]
    Split(String),

    #[error("task needs {required} examples but the pool has {available}")]
    InsufficientPool { required: usize, available: usize },

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("training diverged at epoch {epoch}, task {task} (rec={rec}, kl={kl}, aux={aux})")]
    Diverged {
        epoch: usize,
        task: usize,
        rec: f64,
        kl: f64,
        aux: f64,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
