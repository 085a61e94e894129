use crate::error::{Error, Result};
use crate::io::ConditionSet;
use crate::pvqvae::PVqVae;
use crate::transformer::{ConditionEncoders, ConditionFeatures, UqTransformer};

/// Image P-VQVAE, transformer and optional condition encoders that agree on
/// patch size, grid, `D` and `K`.
#[derive(Clone, Debug)]
pub struct PutModels {
    pub pvqvae: PVqVae,
    pub transformer: UqTransformer,
    pub conditions: Option<ConditionEncoders>,
}

impl PutModels {
    pub fn new(pvqvae: PVqVae, transformer: UqTransformer, conditions: Option<ConditionEncoders>) -> Result<Self> {
        let t = transformer.config();
        t.check_pvqvae(pvqvae.config())?;
        match (&conditions, t.with_conditions) {
            (Some(enc), true) => enc.check(pvqvae.config(), t)?,
            (None, true) => {
                return Err(Error::Config("conditioned transformer needs condition encoders".into()));
            }
            (Some(_), false) => {
                return Err(Error::Config("condition encoders given for an unconditioned transformer".into()));
            }
            (None, false) => {}
        }
        Ok(Self {
            pvqvae,
            transformer,
            conditions,
        })
    }

    pub fn with_conditions(&self) -> bool {
        self.transformer.config().with_conditions
    }

    /// Condition features for a request; an unconditioned model rejects maps.
    pub fn condition_features(&self, conditions: &ConditionSet) -> Result<ConditionFeatures> {
        let cfg = self.pvqvae.config();
        match &self.conditions {
            Some(enc) => {
                conditions.validate(cfg.height, cfg.width, enc.classes())?;
                enc.features(conditions)
            }
            None if conditions.is_empty() => Ok(ConditionFeatures::none()),
            None => Err(Error::InvalidCondition("this model takes no condition maps".into())),
        }
    }
}
