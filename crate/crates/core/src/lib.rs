//! Pose-augmented anchor-free behavior detection.

pub mod annotation;
pub mod evaluation;
pub mod fsutil;
pub mod geometry;
pub mod losses;
pub mod network;
pub mod pose;
pub mod postprocess;
pub mod render;
pub mod synth;
pub mod targets;
pub mod trainer;

pub use geometry::BBox;
