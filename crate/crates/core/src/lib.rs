//! Range-image LiDAR place recognition.
//!
//! Scans are projected into three-channel range images, encoded into patch
//! features, pooled by entropic optimal transport into global descriptors and
//! trained with patch-level contrastive and truncated smooth-AP objectives.

pub mod aggregate;
pub mod augment;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod loss;
pub mod mining;
pub mod params;
pub mod riv;
pub mod scan_geometry;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
