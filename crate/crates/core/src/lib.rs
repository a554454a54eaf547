//! Weakly-supervised segmentation from image-level labels.
//!
//! Stage one trains a multi-scale network under multiple instance learning
//! with naive all-zero / all-one masks. Stage two refines it by distilling
//! the frozen teacher's fused map into every block of a student, with a
//! weighted cross-entropy regularizer and periodic teacher/student
//! parameter switches.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix the
//! precision for the common cases.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use layers::{bilinear_resize, sigmoid};
pub use scalar::Scalar;

pub type SegModelF32 = model::SegModel<f32>;
pub type SegModelF64 = model::SegModel<f64>;
pub type DatasetF32 = data::Dataset<f32>;
pub type DatasetF64 = data::Dataset<f64>;
pub type ProbMapF32 = tensor::ProbMap<f32>;
pub type ProbMapF64 = tensor::ProbMap<f64>;
pub type MultiScaleOutputF32 = model::MultiScaleOutput<f32>;
pub type MultiScaleOutputF64 = model::MultiScaleOutput<f64>;
