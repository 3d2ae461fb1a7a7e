//! Multi-perspective inference for natural language inference.
//!
//! Sentence pairs are encoded by a cross-alignment encoder; per-token
//! features are then routed by agreement into one capsule per relation
//! (entailment, neutral, contradiction), and the final label is predicted
//! from all perspectives together. An auxiliary loss asks each perspective
//! to predict its own relation.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod label;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use label::{Label, Perspective};
pub use model::{Model, ModelConfig, Variant};
pub use params::{ParamGrads, ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use tensor::Tensor;
pub use vocab::Vocabulary;
