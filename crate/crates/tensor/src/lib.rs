//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Values live in [`Tensor`], a row-major buffer with an explicit shape.
//! Differentiable computations are recorded on a [`Tape`] (define-by-run, a
//! fresh tape per forward pass) and differentiated with [`Tape::backward`].
//! The operator set is deliberately small: exactly what a convolutional
//! classifier, a Wasserstein autoencoder and gradient-based attacks need.
//!
//! Storage and compute default to `f32`. Every type is generic over
//! [`Real`] so that the same code runs in `f64`, which the gradient tests use
//! as a high-precision shadow path.

// `!(x > 0.0)` is how parameter checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod archive;
mod error;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod tape;
mod tensor;

pub use archive::{read_archive, read_archive_file, write_archive, write_archive_file, Archive, AEDM_MAGIC, AEDM_VERSION};
pub use error::{Result, TensorError};
pub use optim::{OptimizerKind, OptimizerState};
pub use tape::{Gradients, KernelKind, Tape, Var};
pub use tensor::{Real, Tensor};
