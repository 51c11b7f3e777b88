//! Modular feature inversion for micro transformer vision models.
//!
//! A staged forward model (ViT-style classifier or DETR-style detector) is
//! trained and frozen; one small inverse component is then trained per stage
//! to map that stage's activations back to the previous stage. Composing the
//! components reconstructs images from any stage. The [`analysis`] module
//! holds the perturbation and profiling protocols run on top.
//!
//! Numeric code is generic over [`Real`]; the aliases at the crate root fix
//! the element type to `f64`, which is what the pipeline uses.

pub mod analysis;
pub mod data_io;
pub mod error;
pub mod inversion;
pub mod model_zoo;
pub mod rng;
pub mod scalar;
pub mod tensor_core;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor64 = tensor_core::Tensor<f64>;
pub type Graph64 = tensor_core::Graph<f64>;
pub type ParamStore64 = tensor_core::ParamStore<f64>;
pub type ForwardModel64 = model_zoo::ForwardModel<f64>;
pub type InverseComponent64 = inversion::InverseComponent<f64>;
pub type InverseStack64 = inversion::InverseStack<f64>;
pub type Sample64 = data_io::Sample<f64>;
