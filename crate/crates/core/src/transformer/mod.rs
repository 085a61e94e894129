//! Un-quantized transformer: continuous patch features in, token distributions out.

mod augment;
mod conditions;
mod config;
mod loss;
mod model;
mod train;

pub use augment::{random_quantize_inputs, substitute_unknown_categories};
pub use conditions::{condition_config, semantic_image, sketch_image, ConditionEncoders, ConditionKind};
pub use config::TransformerConfig;
pub use loss::{nll_loss, transformer_loss, TokenLoss};
pub use model::{ConditionFeatures, EmbeddingIds, UqTransformer};
pub use train::{
    target_tokens, PreparedSample, TransformerSample, TransformerStepRecord, TransformerTrainConfig,
    TransformerTrainer,
};

use crate::error::Result;
use crate::io::Checkpoint;

/// Writes a transformer and, for conditioned models, its condition encoders.
pub fn save_transformer(
    path: impl AsRef<std::path::Path>,
    model: &UqTransformer,
    encoders: Option<&ConditionEncoders>,
    trainer: Option<&TransformerTrainer>,
) -> Result<()> {
    let mut ck = Checkpoint::new();
    ck.set("kind", "transformer");
    model.write_checkpoint(&mut ck, "transformer");
    if let Some(enc) = encoders {
        enc.write_checkpoint(&mut ck);
    }
    if let Some(t) = trainer {
        t.write_state(&mut ck);
    }
    ck.save(path)
}

/// Inverse of [`save_transformer`]; returns the raw container for optimizer state.
pub fn load_transformer(
    path: impl AsRef<std::path::Path>,
) -> Result<(UqTransformer, Option<ConditionEncoders>, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    ck.expect("kind", "transformer")?;
    let model = UqTransformer::read_checkpoint(&ck, "transformer")?;
    let encoders = if model.config().with_conditions {
        Some(ConditionEncoders::read_checkpoint(&ck)?)
    } else {
        None
    };
    Ok((model, encoders, ck))
}
