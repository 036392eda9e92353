//! Hybrid convolution-attention regression models.
//!
//! The crate is `no_std` and only needs `alloc`. It carries everything that is
//! pure computation: a small reverse-mode autodiff engine over dense `f64`
//! tensors, Transformer and modern-Hopfield attention blocks, a convolutional
//! backbone, the model assembly, losses and optimizers, evaluation metrics with
//! patient-grouped cross-validation, and seeded synthetic dataset generators.
//! File formats, configuration and the command line live in the `hca` crate.

#![no_std]
// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod data;
mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod hopfield;
pub(crate) mod math;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{grad_check, grad_check_multi, GradCheckOptions, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
