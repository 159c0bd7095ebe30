use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::ClassLabel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("bad dimensions: {0}")]
    BadDimensions(String),

    #[error("record {index} has no label")]
    UnlabeledInput { index: usize },

    #[error("class {class} has {count} sample(s); at least 2 are needed")]
    TooFewSamples { class: String, count: usize },

    #[error("k = {k} is invalid for {n} samples (need 1 <= k < n)")]
    BadK { k: usize, n: usize },

    #[error("target {target} exceeds sample count {n}")]
    TargetTooLarge { target: usize, n: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("label {0} is outside 0..9")]
    BadLabel(usize),

    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },

    #[error("batch of {0} is too small; need at least 2")]
    BatchTooSmall(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("labeled set is empty")]
    EmptyLabeledSet,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn too_few(class: ClassLabel, count: usize) -> Self {
        Error::TooFewSamples {
            class: class.name().to_string(),
            count,
        }
    }
}
