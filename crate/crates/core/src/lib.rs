//! Single-class video object detection toolkit: aggregates consecutive
//! frames with a correlation-attention module, detects on the middle frame
//! with a single-scale anchor-free network, trains with dynamic label
//! assignment and a confidence + CIOU loss, and evaluates VOC-2007-style AP.

pub mod aggregation;
pub mod assignment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod loss;
pub mod training;
pub mod geometry;
pub mod inference;
pub mod network;
pub mod nn;
pub mod scalar;

pub use error::{Error, Result};
pub use geometry::BoundingBox;
pub use scalar::Real;

/// Default training/inference scalar.
pub type Scalar32 = f32;
/// Verification scalar for finite-difference checks.
pub type Scalar64 = f64;

pub type Box32 = BoundingBox<f32>;
pub type Box64 = BoundingBox<f64>;
