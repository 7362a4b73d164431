//! Dense NCHW tensors and a tape-based reverse-mode autodiff engine with
//! exactly the operators a convolutional detector needs: convolution, group
//! normalization, ReLU, pooling, nearest upsampling, channel concatenation
//! and the scaled exponential used by box regression heads.
//!
//! Loss functions are not part of the tape. Callers compute `dL/d(output)`
//! themselves and seed [`Graph::backward`] with it.

mod float;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use float::Float;
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
