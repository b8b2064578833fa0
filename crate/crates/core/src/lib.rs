pub mod adapters;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod model;
pub mod orchestration;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod v2x;

pub use error::{Error, Result};
pub use tensor::Tensor;
