//! Simulator and control core for a vision-guided pneumatic lentil sorter.
//!
//! The detection math in [`geometry`] is generic over the scalar type; the
//! simulation, tracking and experiment layers work in `f64`. Concrete
//! aliases for the common instantiations live at the crate root.

// `!(a > b)` is used on purpose wherever NaN must fail a check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod cli;
pub mod config;
pub mod conveyor;
pub mod eventlog;
pub mod experiment;
pub mod geometry;
pub mod scalar;
pub mod scheduler;

use num_rational::Ratio;

pub use classifier::{Classifier, ConfusionMatrix, GrainClass, Mixture};
pub use config::LineConfig;
pub use scalar::{Real, Scalar};

pub type BBox64 = geometry::BBox<f64>;
pub type BBox32 = geometry::BBox<f32>;
/// Exact box arithmetic, used to pin IoU fixtures without rounding.
pub type BBoxExact = geometry::BBox<Ratio<i64>>;
pub type Detection64 = geometry::Detection<f64>;
pub type Detection32 = geometry::Detection<f32>;
pub type Logits64 = geometry::Logits<f64>;
pub type LossWeights64 = geometry::LossWeights<f64>;
pub type Calibration64 = geometry::Calibration<f64>;
pub type CalibrationExact = geometry::Calibration<Ratio<i64>>;
pub type PixelPoint64 = geometry::PixelPoint<f64>;
pub type BeltPoint64 = geometry::BeltPoint<f64>;
