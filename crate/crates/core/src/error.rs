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

    #[error("modality {modality}: expected input dimension {expected}, got {actual}")]
    ModalityDim {
        modality: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("missing modality file for `{modality}`: {}", path.display())]
    MissingModalityFile { modality: String, path: PathBuf },

    #[error("{}: expected {expected} rows, found {actual}", path.display())]
    RowCount {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{}: label {label} out of range for {classes} classes", path.display())]
    LabelOutOfRange {
        path: PathBuf,
        label: usize,
        classes: usize,
    },

    #[error("{}: expected {expected} feature columns, found {actual}", path.display())]
    DimensionMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("zero vector cannot be normalized (instance {instance}, modality {modality})")]
    ZeroVector { instance: usize, modality: usize },

    #[error("unknown modality `{name}`; valid modalities: {}", valid.join(", "))]
    UnknownModality { name: String, valid: Vec<String> },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
