//! Gradient attribution for small feed-forward networks: Integrated
//! Gradients, SmoothGrad and SmoothTaylor, plus perturbation (AUPC) and
//! total-variation (AUTVC) evaluation and adaptive noise-scale search.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod attribution;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod perturbation;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::{Tensor, ValueRange};
