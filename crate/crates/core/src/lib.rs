//! Two-stream LiDAR/camera road segmentation with skip-cross fusion.

pub mod data;
pub mod geometry;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod tensor;
pub mod train;
