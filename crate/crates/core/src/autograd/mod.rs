//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are `f64`, row-major, rank 0 to 2. There is no broadcasting: every
//! op states the shapes it accepts, and row-wise scaling is its own op
//! ([`scale_rows`]). Graphs are built eagerly and live as long as the output
//! tensor; a graph is single-threaded (`Rc`), while disjoint graphs may be
//! built on separate threads.

mod ops;
mod tensor;

pub mod gradcheck;

use thiserror::Error;

pub use ops::{
    add, column, concat, cross_entropy, dot, exp, gather_rows, l2_normalize, log, logsumexp,
    matmul, matmul_nt, mean, mul, relu, reshape, row, scale, scale_rows, scatter_rows, softmax,
    sub, sum, topk_renormalize,
};
pub use tensor::Tensor;


#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("cannot normalize a vector with norm {norm}")]
    DegenerateInput { norm: f64 },
    #[error("log is undefined for {value}")]
    Domain { value: f64 },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("{op} of an empty tensor")]
    Empty { op: &'static str },
}
