//! Patch-based VQ-VAE with a dual codebook and mask-guided decoder.

mod codebook;
mod config;
mod decoder;
mod encoder;
mod loss;
mod masked;
mod model;
mod patches;
mod train;

pub use codebook::{DualCodebook, QuantizeMode, Quantized};
pub use config::PvqvaeConfig;
pub use decoder::{mga_fuse, mga_fuse_var, Decoder};
pub use encoder::Encoder;
pub use loss::{straight_through, vqvae_loss, VqLoss};
pub use masked::{MaskedImage, Provenance, RatioMap, TokenGrid};
pub use model::{composite, PVqVae};
pub use patches::{assemble_patches, partition_patches};
pub use train::{PvqvaeStepRecord, PvqvaeTrainConfig, PvqvaeTrainer, TrainMode};
