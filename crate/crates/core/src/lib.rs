pub mod archive;
pub mod autograd;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod evaluation;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod perceptual;
pub mod pipeline;
pub mod qformer;
pub mod resample;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
