//! Synthetic scene generation, inference pipeline, toy training and
//! benchmarking for binary-code keypoint localization.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod noise;
pub mod object;
pub mod parallel;
pub mod pipeline;
pub mod scene;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
