//! Multi-scale pattern reproduction forecasting on a small reverse-mode
//! autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! unsuffixed aliases below use `f64`.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Ablation, ModelConfig, MprNet};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use training::{LossKind, TrainConfig};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type MprNet32 = model::MprNet<f32>;
pub type MprNet64 = model::MprNet<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
