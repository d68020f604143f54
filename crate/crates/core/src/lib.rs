//! Learned visual masking for full-reference image quality metrics.

pub mod checkpoint;
pub mod cli;
pub mod conv;
pub mod data;
pub mod deep;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod restoration;
pub mod training;
pub mod visualization;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
pub use image::Image;
pub use masking::{EnhancedMetric, Mask, MaskGenerator, ScalerNetwork};
pub use metrics::{MetricContext, MetricId, MetricOutput, MetricResult, Orientation};
