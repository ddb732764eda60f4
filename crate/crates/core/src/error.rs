//! Error type shared across the toolkit.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("class {class} has no image features")]
    EmptyClass { class: usize },

    #[error("class {class}: weighted caption sum is the zero vector")]
    DegeneratePrototype { class: usize },

    #[error("missing data for classes {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("class {class} caption {caption}: {what}")]
    IncompleteCandidate {
        class: usize,
        caption: usize,
        what: &'static str,
    },

    #[error("no caption candidates survived pruning")]
    EmptyKeptSet,

    #[error("no teacher prototype for class {class}")]
    MissingPrototype { class: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty base class set")]
    EmptyBaseSet,

    #[error("query {query} has an empty relevance set")]
    EmptyRelevance { query: String },

    #[error("metric input out of range: {0}")]
    MetricOutOfRange(String),

    #[error("non-finite gradient for {path}")]
    NonFiniteGradient { path: String },

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    MalformedFile { path: PathBuf, message: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing input path: {0}")]
    MissingPath(PathBuf),
}

impl Error {
    /// True for numerical failures (divergence, degenerate prototypes),
    /// which the CLI reports with a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::DegeneratePrototype { .. }
                | Error::NonFiniteGradient { .. }
                | Error::ZeroVector
        )
    }
}
