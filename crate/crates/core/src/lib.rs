//! Few-shot semantic segmentation by parameter prediction.
//!
//! A conditioning branch looks at one masked support image and emits the
//! weights of a pixel-level logistic classifier; a segmentation branch turns
//! the query image into a dense feature volume that the predicted classifier
//! labels pixel by pixel. Everything needed to train and benchmark the model
//! lives here: a small reverse-mode autodiff engine, the fixed hashing layer,
//! the episodic data pipeline, four learned baselines and the IoU harness.

pub mod baselines;
pub mod dataset;
mod error;
pub mod hashing;
pub mod metrics;
pub mod model;
pub mod predictor;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
