use thiserror::Error;

/// Errors raised by graph construction, backpropagation and weight I/O.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("backward was already run on this graph; build a new graph")]
    GraphReused,
    #[error("corrupt weights: {0}")]
    CorruptWeights(String),
    #[error("invalid layer spec: {0}")]
    InvalidLayer(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
