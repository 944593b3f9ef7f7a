//! Dense tensors with a tape-based reverse-mode autodiff graph.
//!
//! The engine is deliberately small: contiguous row-major storage, a fixed
//! set of differentiable ops, and GEMM delegated to `matrixmultiply`.
//! Every op is generic over [`Elem`] so the same model code runs in `f32`
//! for training throughput and in `f64` where finite-difference checks
//! need the extra precision.

mod conv;
mod elem;
mod gemm;
pub mod check;
pub mod graph;
pub mod optim;
mod tensor;

pub use conv::ConvGeometry;
pub use elem::{DType, Elem};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, Binder, Bound, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
}
