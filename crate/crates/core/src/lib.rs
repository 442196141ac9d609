pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;
pub mod schedule;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Image32 = types::Image<f32>;
pub type Image64 = types::Image<f64>;
pub type ProbabilityField32 = types::ProbabilityField<f32>;
pub type ProbabilityField64 = types::ProbabilityField<f64>;
pub type SegmentationModel32 = model::SegmentationModel<f32>;
pub type SegmentationModel64 = model::SegmentationModel<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
