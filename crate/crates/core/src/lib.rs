//! Pluralistic image inpainting with a patch VQ-VAE and an un-quantized transformer.

pub mod error;
pub mod io;
pub mod nn;
pub mod pvqvae;
pub mod rng;
pub mod sampler;
pub mod transformer;

pub use error::{Error, Result};
