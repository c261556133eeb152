//! Image backbone, keypoint graph network, losses and training utilities for
//! progressive binary-code keypoint localization.

pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod graphnet;
pub mod image_io;
pub mod layers;
mod linalg;
pub mod loss;
pub mod model;
pub mod optim;
pub mod param;
pub mod tensor;

pub use error::{Error, Result};
