//! Volumetric CNN engine for classifying infant brain MRI into six
//! developmental age cohorts.
//!
//! The crate covers NIfTI-1 ingestion, preprocessing to a fixed cubic grid,
//! a from-scratch 3D CNN with explicit backward passes, RMSprop training and
//! the per-class metric suite used to report results.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Shape, Tensor};
