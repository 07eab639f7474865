//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! Ops are evaluated as they are recorded on a [`Graph`]; [`Graph::backward`]
//! then sweeps the tape once in reverse. The primitive set is what a small
//! pre-norm transformer needs: matmul, elementwise add/mul, row softmax,
//! RMS-norm, SiLU, embedding gather, row-wise cross-entropy, causal
//! multi-head attention, reductions, and a handful of row/column routing ops
//! used for sparse expert dispatch.

mod backward;
mod error;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_diff_check, FdReport};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{log_sum_exp, softmax_in_place, Tensor};
