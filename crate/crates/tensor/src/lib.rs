//! A small reverse-mode automatic differentiation engine over dense CPU
//! tensors, generic over `f32` and `f64`.
//!
//! Operations are recorded on a [`Graph`] as they execute. Layers that need
//! a hand-written backward pass attach it through [`Graph::push_op`].

pub mod check;
mod error;
mod float;
mod graph;
pub mod init;
mod ops;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use float::{gemm, Float, MatRef};
pub use graph::{Backward, ConcatEvent, Gradients, Graph, Var};
pub use ops::LOGIT_CLIP;
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
