use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("no gradient available for any parameter of the optimizer (first: {0})")]
    MissingGrad(String),

    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),

    #[error("invalid alpha table: {0}")]
    InvalidAlpha(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("truncated file {path}: record at byte offset {offset} is incomplete")]
    Truncated { path: PathBuf, offset: u64 },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
