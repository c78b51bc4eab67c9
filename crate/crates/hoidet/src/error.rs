//! One error type for the whole crate. Variants are grouped by the layer
//! that raises them; everything converts into [`Error`] so module boundaries
//! stay `Result`-friendly without a web of conversion impls.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // tensor engine
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("softmax row is fully masked")]
    DegenerateSoftmaxRow,
    #[error("tensor was recorded on a different tape")]
    TapeMismatch,
    #[error("backward needs a tracked scalar loss, got shape {shape:?}")]
    BadLoss { shape: Vec<usize> },

    // taxonomy / scenes / embeddings
    #[error("taxonomy error: {0}")]
    Taxonomy(String),
    #[error("scene generation error: {0}")]
    Scene(String),
    #[error("embedding error: {0}")]
    Embedding(String),

    // losses / model
    #[error("model error: {0}")]
    Model(String),
    #[error("loss error: {0}")]
    Loss(String),

    // configuration and run plumbing
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
