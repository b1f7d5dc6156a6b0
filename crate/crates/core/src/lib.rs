pub mod alignment;
pub mod archive;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod image_encoder;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod qgcam;
pub mod text_encoder;

pub use error::{Error, Result};
