//! Depth-aware video saliency prediction.
//!
//! A two-stream (RGB and depth) 3-D residual encoder with attention modules
//! at every scale, a multi-scale decoder per stream, late fusion heads,
//! a deep-supervision training objective and the standard saliency metrics.
//! Numerics are generic over [`scalar::Scalar`] (`f32` or `f64`).

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::ModelConfig;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = model::SaliencyModel<f32>;
pub type Model64 = model::SaliencyModel<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type GroundTruth32 = data::GroundTruth<f32>;
pub type GroundTruth64 = data::GroundTruth<f64>;
