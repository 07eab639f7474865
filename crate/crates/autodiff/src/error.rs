use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("index out of range at node {node} ({op}): {detail}")]
    Index {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("backward root node {node} is not a scalar (shape {shape:?})")]
    NonScalarRoot { node: usize, shape: Vec<usize> },

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("finite-difference step must be positive and finite, got {0}")]
    BadStep(f64),

    #[error("non-finite value encountered while perturbing element {index}")]
    NonFinite { index: usize },
}
