//! Geometry, hierarchical keypoint codes, visibility analysis, PnP solving and
//! pose metrics for dense-correspondence object pose estimation.

pub mod codes;
pub mod error;
pub mod geometry;
pub mod hull;
pub mod mesh;
pub mod metrics;
pub mod solver;
pub mod visibility;

pub use error::{Error, Result};
