/// Crate-wide error type. Variants carry enough context to act on the
/// failure without re-running: shape errors name both shapes, path errors
/// name the parameter.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("target index {index} out of range for vocab size {vocab}")]
    TargetOutOfRange { index: usize, vocab: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown language key '{0}'")]
    UnknownLanguage(String),

    #[error("adapter bank already holds language '{0}'")]
    DuplicateInjection(String),

    #[error("duplicate parameter path '{0}'")]
    DuplicatePath(String),

    #[error("missing parameter path '{path}' in {context}")]
    MissingPath { path: String, context: String },

    #[error("shape mismatch for parameter '{path}': checkpoint {found:?} vs model {expected:?}")]
    ParamShapeMismatch {
        path: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Corpus(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
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
