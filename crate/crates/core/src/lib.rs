//! Multi-task spatio-temporal network for video saliency estimation, action
//! recognition and summarization, built on a small reverse-mode autodiff
//! engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsam;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sample;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
