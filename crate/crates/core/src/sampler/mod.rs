//! Multi-token autoregressive sampling of masked cells.

mod models;
mod select;
mod session;

pub use models::PutModels;
pub use select::{
    iteration_count, replace_features, select_patches, truncate_and_sample, truncated_distribution, K1,
};
pub use session::{SamplingSession, StepOutcome};

use put_tensor::exec::try_map_indexed;
use put_tensor::Parallelism;

use crate::error::{Error, Result};
use crate::io::{ConditionSet, Image, Mask};
use crate::pvqvae::TokenGrid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub k1: K1,
    pub k2: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k1: K1::Top(20),
            k2: 200,
            n_samples: 1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Every cell in a single iteration.
    pub fn one_shot(k2: usize) -> Self {
        Self {
            k1: K1::All,
            k2,
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.k1 == K1::Top(0) {
            return Err(Error::Config("k1 must be at least 1".into()));
        }
        if self.k2 == 0 || self.k2 > vocab {
            return Err(Error::Config(format!("k2 = {} must lie in [1, {vocab}]", self.k2)));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// One completed sample.
#[derive(Clone, Debug)]
pub struct InpaintResult {
    pub image: Image,
    pub tokens: TokenGrid,
    /// Cells filled at each iteration.
    pub trace: Vec<Vec<usize>>,
}

/// Runs `n_samples` independent sessions to completion. Samples differ only
/// through their random streams, so results do not depend on `parallelism`.
pub fn inpaint(
    models: &PutModels,
    image: &Image,
    mask: &Mask,
    conditions: &ConditionSet,
    config: &SamplerConfig,
    parallelism: Parallelism,
) -> Result<Vec<InpaintResult>> {
    config.validate(models.transformer.config().vocab)?;
    let features = models.condition_features(conditions)?;
    try_map_indexed(parallelism, config.n_samples, |i| {
        let rng = crate::rng::stream(config.seed, &[i as u64]);
        let mut session = SamplingSession::new(models, image, mask, features.clone(), rng)?;
        session.run(models, config.k1, config.k2)?;
        Ok(InpaintResult {
            image: session.finish(models)?,
            tokens: session.grid().clone(),
            trace: session.trace().to_vec(),
        })
    })
}
