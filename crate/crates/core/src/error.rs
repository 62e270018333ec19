use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite: pivot {pivot} has value {value:e}")]
    Singular { pivot: usize, value: f64 },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("forward trace does not match: {0}")]
    Trace(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("class {class} has no embeddings to build a prototype from")]
    MissingPrototype { class: usize },

    #[error("task {0} has no training data")]
    EmptyTask(usize),

    #[error("learner state: {0}")]
    State(String),

    #[error("cannot expand from {current} to {requested} classes")]
    InvalidExpansion { current: usize, requested: usize },

    #[error("divergence batch is empty")]
    EmptyBatch,

    #[error("evaluation set is empty")]
    EmptyEval,

    #[error("accuracy list is empty")]
    EmptyMetrics,

    #[error("cannot split {classes} classes into {tasks} tasks")]
    InvalidSplit { classes: usize, tasks: usize },

    #[error("{path}: {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("labels are not dense: missing {missing:?}")]
    LabelGap { missing: Vec<usize> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad file format: {message}")]
    Format { path: PathBuf, message: String },

    #[error("session {session}, {operation}: {source}")]
    Session {
        session: usize,
        operation: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach the session index and operation name for error reports.
    pub fn in_session(self, session: usize, operation: &'static str) -> Self {
        match self {
            e @ Error::Session { .. } => e,
            other => Error::Session {
                session,
                operation,
                source: Box::new(other),
            },
        }
    }
}
