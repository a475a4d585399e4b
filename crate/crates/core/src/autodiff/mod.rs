//! Minimal reverse-mode automatic differentiation over rank ≤ 2 tensors.
//!
//! A [`Graph`] records operations as they execute. [`Graph::backward`]
//! walks the recorded nodes in exact reverse insertion order, so two
//! backward passes over the same graph are bitwise identical.
//!
//! ```
//! use e2emil::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
//! let y = g.mul(x, c).unwrap();
//! let loss = g.reduce_sum(y).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
//! ```

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Activation, BackwardState, BinaryOp, Gradients, Graph, Var};
pub use tensor::{Precision, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("tensors above rank 2 are not supported (shape {0:?})")]
    RankTooHigh(Vec<usize>),
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("row range {start}..{} out of bounds for shape {shape:?}", start + len)]
    RowRange {
        shape: Vec<usize>,
        start: usize,
        len: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this graph")]
    DetachedNode,
    #[error("node {0} was already finalized by the backward sweep")]
    AlreadyFinalized(usize),
}
