//! Minimal reverse-mode differentiable model core.
//!
//! A [`Model`] is an ordered stack of [`Layer`]s. The input gradient of a
//! selected class score is obtained by running the forward pass, keeping every
//! activation, and then pulling a cotangent back through each layer's
//! vector-Jacobian product in reverse order.

mod check;
mod io;
mod layer;
mod model;

pub use check::{gradcheck, gradcheck_with, BackwardRule, GradCheckConfig, GradCheckReport, LayerCheck};
pub use io::{
    decode_model, encode_model, load_model, save_model, BlobRef, LayerSpec, Manifest, MODEL_FORMAT, MODEL_VERSION,
};
pub use layer::Layer;
pub use model::{Model, ScoreKind, ScoreTarget};
