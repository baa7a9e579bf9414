//! Latent-space test-time adaptation: corruption encoders, per-domain
//! sub-network banks and an online adaptation runtime, on a small
//! tape-based autodiff engine generic over `f32`/`f64`.

pub mod backbone;
pub mod bank;
pub mod data;
pub mod encoder;
pub mod error;
pub mod extractor;
pub mod harness;
pub mod memory;
pub mod nn;
pub mod runtime;
pub mod scalar;
pub mod signature;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
