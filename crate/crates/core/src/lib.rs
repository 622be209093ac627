pub mod augmentation;
pub mod contribution;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod strategy;
pub mod toytask;

pub use error::{Error, Result};
