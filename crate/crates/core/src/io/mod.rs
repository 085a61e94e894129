//! Corpus ingestion, masks, checkpoints and metrics.

pub mod checkpoint;
pub mod conditions;
pub mod corpus;
pub mod image;
pub mod mask;
pub mod metrics;

pub use checkpoint::{Checkpoint, TensorData};
pub use conditions::{ConditionSet, SemanticMap, SketchMap};
pub use corpus::{list_images, load_corpus, toy_corpus, toy_sample, ToySample};
pub use image::{decode_gray, decode_image, encode_png, load_gray, load_image, save_image, GrayMap, Image};
pub use mask::{generate_mask, load_mask, Mask};
pub use metrics::{metrics, psnr, ssim, token_metrics, ImageMetrics, TokenMetrics, PSNR_CAP};
