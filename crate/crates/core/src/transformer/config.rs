use crate::error::{Error, Result};
use crate::io::conditions::{DEFAULT_CATEGORIES, DEFAULT_UNKNOWN};
use crate::io::Checkpoint;
use crate::pvqvae::PvqvaeConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// `D′`: width of the projected patch embedding.
    pub input_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `K`: size of the unmasked codebook predicted over.
    pub vocab: usize,
    /// `D` of the image P-VQVAE whose features are embedded.
    pub feature_dim: usize,
    pub with_conditions: bool,
    /// `D` of the two condition P-VQVAEs; unused without conditions.
    pub condition_dim: usize,
    /// Known semantic categories `C`.
    pub categories: usize,
    /// Reserved unknown categories `U`.
    pub unknown: usize,
}

impl TransformerConfig {
    /// ViT-Base sized, unconditioned, for 256×256 images at `r = 8`.
    pub fn full() -> Self {
        Self {
            depth: 12,
            hidden_dim: 768,
            heads: 12,
            mlp_ratio: 4.0,
            input_dim: 768,
            grid_h: 32,
            grid_w: 32,
            vocab: 8192,
            feature_dim: 256,
            with_conditions: false,
            condition_dim: 256,
            categories: DEFAULT_CATEGORIES,
            unknown: DEFAULT_UNKNOWN,
        }
    }

    /// ViT-Base sized with semantic and sketch conditions.
    pub fn full_conditioned() -> Self {
        Self {
            input_dim: 256,
            with_conditions: true,
            ..Self::full()
        }
    }

    /// Two blocks over the 8×8 grid of the toy P-VQVAE.
    pub fn toy() -> Self {
        Self {
            depth: 2,
            hidden_dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            input_dim: 64,
            grid_h: 8,
            grid_w: 8,
            vocab: 128,
            feature_dim: 32,
            with_conditions: false,
            condition_dim: 16,
            categories: 8,
            unknown: 4,
        }
    }

    pub fn toy_conditioned() -> Self {
        Self {
            input_dim: 32,
            with_conditions: true,
            ..Self::toy()
        }
    }

    /// Matches grid, vocabulary and feature width to an image P-VQVAE.
    pub fn for_pvqvae(mut self, p: &PvqvaeConfig) -> Self {
        let (h, w) = p.grid();
        self.grid_h = h;
        self.grid_w = w;
        self.vocab = p.codebook_size;
        self.feature_dim = p.feature_dim;
        self
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads.max(1)
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.hidden_dim as f64) * self.mlp_ratio).round() as usize
    }

    /// Channels of the one-hot semantic input, `C + U`.
    pub fn semantic_classes(&self) -> usize {
        self.categories + self.unknown
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let expected_hidden = if self.with_conditions {
            self.input_dim + 2 * self.condition_dim
        } else {
            self.input_dim
        };
        if self.hidden_dim != expected_hidden {
            return fail(format!(
                "hidden_dim {} must equal {expected_hidden} (input_dim {}, conditions {})",
                self.hidden_dim, self.input_dim, self.with_conditions
            ));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return fail(format!("hidden_dim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.vocab == 0 || self.feature_dim == 0 || self.input_dim == 0 {
            return fail("grid, vocab, feature_dim and input_dim must be positive".into());
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_dim() == 0 {
            return fail(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.with_conditions && (self.condition_dim == 0 || self.unknown == 0 || self.categories == 0) {
            return fail("conditioned models need condition_dim, categories and unknown ≥ 1".into());
        }
        if self.semantic_classes() > 256 {
            return fail(format!("C + U = {} exceeds 256", self.semantic_classes()));
        }
        Ok(())
    }

    /// Rejects an image P-VQVAE whose grid, `K` or `D` disagree with this model.
    pub fn check_pvqvae(&self, p: &PvqvaeConfig) -> Result<()> {
        let (h, w) = p.grid();
        let pairs = [
            ("grid_h", self.grid_h, h),
            ("grid_w", self.grid_w, w),
            ("codebook_size", self.vocab, p.codebook_size),
            ("feature_dim", self.feature_dim, p.feature_dim),
        ];
        for (key, want, found) in pairs {
            if want != found {
                return Err(Error::ConfigMismatch {
                    key: key.into(),
                    expected: want.to_string(),
                    found: found.to_string(),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn write(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.set(&format!("{prefix}.depth"), self.depth);
        ck.set(&format!("{prefix}.hidden_dim"), self.hidden_dim);
        ck.set(&format!("{prefix}.heads"), self.heads);
        ck.set(&format!("{prefix}.mlp_ratio"), self.mlp_ratio);
        ck.set(&format!("{prefix}.input_dim"), self.input_dim);
        ck.set(&format!("{prefix}.grid_h"), self.grid_h);
        ck.set(&format!("{prefix}.grid_w"), self.grid_w);
        ck.set(&format!("{prefix}.vocab"), self.vocab);
        ck.set(&format!("{prefix}.feature_dim"), self.feature_dim);
        ck.set(&format!("{prefix}.with_conditions"), self.with_conditions);
        ck.set(&format!("{prefix}.condition_dim"), self.condition_dim);
        ck.set(&format!("{prefix}.categories"), self.categories);
        ck.set(&format!("{prefix}.unknown"), self.unknown);
    }

    pub(crate) fn read(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let k = |name: &str| format!("{prefix}.{name}");
        let cfg = Self {
            depth: ck.parse(&k("depth"))?,
            hidden_dim: ck.parse(&k("hidden_dim"))?,
            heads: ck.parse(&k("heads"))?,
            mlp_ratio: ck.parse(&k("mlp_ratio"))?,
            input_dim: ck.parse(&k("input_dim"))?,
            grid_h: ck.parse(&k("grid_h"))?,
            grid_w: ck.parse(&k("grid_w"))?,
            vocab: ck.parse(&k("vocab"))?,
            feature_dim: ck.parse(&k("feature_dim"))?,
            with_conditions: ck.parse(&k("with_conditions"))?,
            condition_dim: ck.parse(&k("condition_dim"))?,
            categories: ck.parse(&k("categories"))?,
            unknown: ck.parse(&k("unknown"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [
            TransformerConfig::full(),
            TransformerConfig::full_conditioned(),
            TransformerConfig::toy(),
            TransformerConfig::toy_conditioned(),
        ] {
            c.validate().unwrap();
        }
        assert_eq!(TransformerConfig::full_conditioned().hidden_dim, 768);
    }

    #[test]
    fn hidden_must_match_conditions() {
        let mut c = TransformerConfig::toy();
        c.with_conditions = true;
        assert!(c.validate().is_err());
        let mut c = TransformerConfig::toy();
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
