//! Small reverse-mode automatic differentiation engine over dense NCHW tensors.
//!
//! Convolutions lower to im2col + GEMM. Everything is generic over [`Scalar`]
//! so the same graph code can be evaluated in `f64` for gradient checks.

pub mod check;
mod conv;
mod graph;
mod tensor;

pub use conv::{conv_out, conv_transpose_out};
pub use graph::{conv2d_out, BufferUpdate, CustomOp, Gradients, Graph, ParamId, Var};
pub use tensor::{Scalar, Tensor};
