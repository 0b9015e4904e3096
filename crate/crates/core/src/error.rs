use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("softmax group {0} is empty")]
    EmptyGroup(usize),

    #[error("loss must be a 1x1 tensor, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("forward pass is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Load {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }

    /// Process exit code for the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Load { .. }
            | Error::Graph(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Checkpoint(_) => 2,
            Error::Shape { .. }
            | Error::NonFinite { .. }
            | Error::EmptyGroup(_)
            | Error::NonScalarLoss { .. }
            | Error::NonDeterministic(_)
            | Error::Metric(_)
            | Error::Numeric(_) => 3,
        }
    }
}
