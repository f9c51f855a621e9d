//! Reverse-mode autodiff over dense tensors, generic over the scalar type.
//!
//! The crate is parameterized by [`Scalar`] (`f32` or `f64`): training code
//! uses the `f32` aliases below, while gradient and SVD oracles instantiate
//! the identical kernels at `f64`. There is no broadcasting beyond the few
//! ops that define it (bias add, FiLM); shapes are checked eagerly.

pub mod check;
mod kernels;
pub mod nn;
pub mod scalar;
pub mod spectral;
pub mod store;
pub mod tape;
pub mod tensor;

pub use scalar::Scalar;
pub use store::{AdamConfig, ParamId, ParameterStore};
pub use tape::{GradAccum, Grads, Tape, TapeError, Var};
pub use tensor::Tensor;

/// Training-time scalar.
pub type F = f32;
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type Store32 = ParameterStore<f32>;

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Store64 = ParameterStore<f64>;
