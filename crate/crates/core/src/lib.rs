pub mod anchors;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffkernel;
pub mod diffusion;
pub mod error;
pub mod evalprobe;
pub mod layers;
pub mod moclip;
pub mod motiondata;
pub mod pipeline;
pub mod seed;
pub mod spectral;

pub use error::{Error, Result};
