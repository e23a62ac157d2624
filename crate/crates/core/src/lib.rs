pub mod autodiff;
pub mod cli;
pub mod denoiser;
pub mod embedding;
mod error;
pub mod eval;
pub mod numerics;
pub mod sampler;
pub mod score;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
