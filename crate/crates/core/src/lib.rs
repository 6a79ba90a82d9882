//! Multi-modal metric learning with a cross-modal center loss.
//!
//! Per-modality encoders map raw samples into one common embedding space,
//! a shared classifier head supplies a cross-entropy signal, and a bank of
//! class centers pulls every modality of a class toward a single point.
//! [`train`] runs the joint mini-batch optimization and [`eval`] measures
//! in-domain and cross-modal retrieval with mean average precision.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Tensor32 = Tensor<f32>;
/// Verification precision.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type CenterBank32 = losses::CenterBank<f32>;
pub type CenterBank64 = losses::CenterBank<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
