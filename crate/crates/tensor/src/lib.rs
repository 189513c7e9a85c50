//! Dense NCHW tensors and a small reverse-mode autodiff engine.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Backward rules
//! are themselves built from differentiable operations, so gradients can
//! be differentiated again.

pub mod kernels;
pub mod nn;
mod ops;
pub mod optim;
mod scalar;
mod tensor;
mod var;

pub use ops::PlaneMap;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use var::{grad, grad_with_seed, is_recording, no_grad, RecordGuard, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
