//! Transferable multi-modal sequential recommendation on a small
//! reverse-mode autodiff core.
//!
//! Items are known only through their text tokens and image patches, so a
//! model trained on one catalog can be carried to another.

pub mod data;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod training;
pub mod transfer;
pub mod user_encoder;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = diffcore::Tensor<f64>;
pub type Graph = diffcore::Graph<f64>;
pub type ParamSet = params::ParamSet<f64>;
pub type Model = model::Model<f64>;
