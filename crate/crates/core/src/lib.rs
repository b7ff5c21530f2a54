//! Region-ensemble texture classification: landmark-driven facial regions,
//! Compass-LBP descriptors, Infinite Feature Selection, per-region linear
//! max-margin classifiers with Platt probabilities, and genetic-algorithm
//! score fusion.

pub mod classify;
pub mod corpus;
pub mod fusion;
pub mod image;
pub mod pipeline;
pub mod regions;
pub mod seed;
pub mod selection;
pub mod texture;

pub use crate::corpus::{Label, SampleRecord};
pub use crate::image::GrayImage;
pub use crate::regions::{GridSpec, LandmarkSet, RegionBox, RegionId};
