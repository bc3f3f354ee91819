pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod distortion;
pub mod error;
pub mod evaluation;
pub mod forensics;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod payload;
pub mod template;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
