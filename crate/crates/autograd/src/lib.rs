//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! then sweeps the tape once. Image tensors are NHWC. Everything is generic over
//! [`Scalar`] so the same model code runs in `f32` for training and in `f64`
//! for finite-difference checks.

pub mod gradcheck;
mod graph;
mod ops;
mod scalar;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use ops::{Conv2d, RoiBox};
pub use ops::roi_helpers::{bilinear_taps, bin_center};
pub use scalar::Scalar;
pub use tensor::{ShapeError, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
