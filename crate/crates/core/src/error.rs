use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    #[error("numerical failure after {iterations} iterations: {what}")]
    NumericalFailure { what: &'static str, iterations: usize },

    #[error("calibration diverged at step {step}: loss {loss:e} vs initial {initial:e}")]
    Divergence {
        step: usize,
        loss: f64,
        initial: f64,
        record: Box<crate::calibrate::CalibRecord>,
    },

    #[error("non-finite gradient at step {step} in parameter group `{group}`")]
    NonFiniteGradient { step: usize, group: &'static str },

    #[error("expressiveness curve undefined: {0}")]
    UndefinedCurve(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("block {block}: {source}")]
    InBlock {
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }
}
