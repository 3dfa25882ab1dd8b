use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{context}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("{context}: {message}")]
    InvalidArgument {
        context: &'static str,
        message: String,
    },

    #[error("{context}: rank {got} unsupported, expected {expected}")]
    RankMismatch {
        context: &'static str,
        expected: &'static str,
        got: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: String },

    #[error("value is not recorded on a gradient graph")]
    Untraced,

    #[error("weights container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(|e| e.to_string()).collect();
    parts.join("x")
}
