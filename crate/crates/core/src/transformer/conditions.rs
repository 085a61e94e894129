use super::config::TransformerConfig;
use super::model::ConditionFeatures;
use crate::error::{Error, Result};
use crate::io::{Checkpoint, ConditionSet, Image, SemanticMap, SketchMap};
use crate::pvqvae::{PVqVae, PvqvaeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionKind {
    Semantic,
    Sketch,
}

impl ConditionKind {
    pub fn prefix(self) -> &'static str {
        match self {
            ConditionKind::Semantic => "cond.semantic",
            ConditionKind::Sketch => "cond.sketch",
        }
    }
}

/// P-VQVAE config for a condition map: no reference branch, `D` set to the
/// transformer's condition width, one plane per semantic class or a single
/// sketch plane.
pub fn condition_config(kind: ConditionKind, image: &PvqvaeConfig, t: &TransformerConfig) -> PvqvaeConfig {
    PvqvaeConfig {
        feature_dim: t.condition_dim,
        in_channels: match kind {
            ConditionKind::Semantic => t.semantic_classes(),
            ConditionKind::Sketch => 1,
        },
        decoder_channels: t.condition_dim,
        reference_branch: false,
        ..image.clone()
    }
}

/// One-hot planes of a semantic map, `[0, C + U)` ids.
pub fn semantic_image(map: &SemanticMap, classes: usize) -> Result<Image> {
    map.one_hot(classes)
}

pub fn sketch_image(map: &SketchMap) -> Image {
    map.to_image()
}

/// The two condition-map P-VQVAEs whose encoder features feed the transformer.
#[derive(Clone, Debug)]
pub struct ConditionEncoders {
    pub semantic: PVqVae,
    pub sketch: PVqVae,
    classes: usize,
}

impl ConditionEncoders {
    pub fn new(image: &PvqvaeConfig, t: &TransformerConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            semantic: PVqVae::new(condition_config(ConditionKind::Semantic, image, t), seed ^ 0x5e)?,
            sketch: PVqVae::new(condition_config(ConditionKind::Sketch, image, t), seed ^ 0x57)?,
            classes: t.semantic_classes(),
        })
    }

    pub fn from_models(semantic: PVqVae, sketch: PVqVae, classes: usize) -> Self {
        Self {
            semantic,
            sketch,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Both models must match `t` and share the grid of `image`.
    pub fn check(&self, image: &PvqvaeConfig, t: &TransformerConfig) -> Result<()> {
        self.semantic
            .config()
            .expect_matches(&condition_config(ConditionKind::Semantic, image, t))?;
        self.sketch
            .config()
            .expect_matches(&condition_config(ConditionKind::Sketch, image, t))?;
        if self.classes != t.semantic_classes() {
            return Err(Error::ConfigMismatch {
                key: "semantic_classes".into(),
                expected: t.semantic_classes().to_string(),
                found: self.classes.to_string(),
            });
        }
        Ok(())
    }

    /// Encoder features of the full condition maps; absent maps stay `None`.
    pub fn features(&self, conditions: &ConditionSet) -> Result<ConditionFeatures> {
        let semantic = match &conditions.semantic {
            Some(map) => Some(self.semantic.encode(&semantic_image(map, self.classes)?)?),
            None => None,
        };
        let sketch = match &conditions.sketch {
            Some(map) => Some(self.sketch.encode(&sketch_image(map))?),
            None => None,
        };
        Ok(ConditionFeatures { semantic, sketch })
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        ck.set("cond.classes", self.classes);
        self.semantic.write_checkpoint(ck, ConditionKind::Semantic.prefix());
        self.sketch.write_checkpoint(ck, ConditionKind::Sketch.prefix());
    }

    pub fn read_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            semantic: PVqVae::read_checkpoint(ck, ConditionKind::Semantic.prefix())?,
            sketch: PVqVae::read_checkpoint(ck, ConditionKind::Sketch.prefix())?,
            classes: ck.parse("cond.classes")?,
        })
    }
}
