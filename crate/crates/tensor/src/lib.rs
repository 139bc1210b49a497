//! A compact reverse-mode automatic differentiation engine specialised for
//! batched volumetric data laid out as `(batch, channels, depth, height,
//! width)`.
//!
//! The engine is generic over [`Scalar`] so the same network code can run in
//! `f32` for training and in `f64` for finite-difference gradient checks.

mod autograd;
pub mod conv;
mod error;
pub mod nn;
mod ops;
pub mod optim;
mod scalar;
mod tensor;

pub use autograd::{grad_enabled, no_grad, Gradients, Var};
pub use conv::ConvSpec;
pub use error::TensorError;
pub use nn::{Conv3d, ConvTranspose3d, InstanceNorm3d, Module, Param};
pub use ops::{concat_channels, conv3d, conv_transpose3d};
pub use optim::{Adam, AdamConfig, Moments};
pub use scalar::Scalar;
pub use tensor::Tensor;
