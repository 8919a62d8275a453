//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! Everything runs single-threaded in a fixed order, so identical inputs give
//! bit-identical values and gradients.

mod graph;
mod ops;
mod spatial;
mod tensor;

pub mod gradcheck;

pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use spatial::resize_bilinear_tensor;
pub use tensor::Tensor;

pub(crate) use ops::gemm;
