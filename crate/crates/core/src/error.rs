use thiserror::Error;

/// Errors produced by the numeric engine, the learners and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op} (node {node:?}): {detail}")]
    Shape {
        op: &'static str,
        node: Option<usize>,
        detail: String,
    },
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("column {0} has zero norm")]
    ZeroColumn(usize),
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<V> = std::result::Result<V, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        node: None,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
