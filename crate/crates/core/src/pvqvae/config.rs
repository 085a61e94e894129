use crate::error::{Error, Result};
use crate::io::Checkpoint;

#[derive(Clone, Debug, PartialEq)]
pub struct PvqvaeConfig {
    /// Patch side `r`, a power of two.
    pub patch_size: usize,
    /// Feature dimension `D`.
    pub feature_dim: usize,
    /// `K`: rows of the unmasked codebook `e`.
    pub codebook_size: usize,
    /// `K′`: rows of the masked codebook `e′`.
    pub masked_codebook_size: usize,
    pub height: usize,
    pub width: usize,
    /// 3 for RGB, `C + U` for one-hot semantic maps, 1 for sketches.
    pub in_channels: usize,
    pub commitment_beta: f32,
    /// Channels at the coarsest decoder level; halves at every upsampling stage.
    pub decoder_channels: usize,
    pub res_blocks: usize,
    /// Condition-map models drop the reference branch and decode plainly.
    pub reference_branch: bool,
}

impl PvqvaeConfig {
    /// Full-size image model.
    pub fn full() -> Self {
        Self {
            patch_size: 8,
            feature_dim: 256,
            codebook_size: 8192,
            masked_codebook_size: 1024,
            height: 256,
            width: 256,
            in_channels: 3,
            commitment_beta: 0.25,
            decoder_channels: 256,
            res_blocks: 2,
            reference_branch: true,
        }
    }

    /// 32×32 desk-scale model.
    pub fn toy() -> Self {
        Self {
            patch_size: 4,
            feature_dim: 32,
            codebook_size: 128,
            masked_codebook_size: 32,
            height: 32,
            width: 32,
            in_channels: 3,
            commitment_beta: 0.25,
            decoder_channels: 32,
            res_blocks: 2,
            reference_branch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let r = self.patch_size;
        if r == 0 || !r.is_power_of_two() {
            return bad(format!("patch_size {r} must be a power of two"));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(r) || !self.width.is_multiple_of(r) {
            return bad(format!(
                "image size {}x{} must be a nonzero multiple of patch_size {r}",
                self.height, self.width
            ));
        }
        if self.feature_dim == 0 || self.codebook_size == 0 || self.masked_codebook_size == 0 {
            return bad("feature_dim, codebook_size and masked_codebook_size must be at least 1".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1".into());
        }
        let div = 1usize << self.levels();
        if self.decoder_channels == 0 || !self.decoder_channels.is_multiple_of(div) {
            return bad(format!(
                "decoder_channels {} must be a positive multiple of {div}",
                self.decoder_channels
            ));
        }
        if !(self.commitment_beta >= 0.0 && self.commitment_beta.is_finite()) {
            return bad(format!("commitment_beta {} must be finite and non-negative", self.commitment_beta));
        }
        Ok(())
    }

    /// `log2(r)`: number of up/down-sampling stages.
    pub fn levels(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    /// Token grid `(H/r, W/r)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn cells(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    /// Decoder channels at pyramid level `l` (0 = full resolution).
    pub fn channels_at(&self, level: usize) -> usize {
        self.decoder_channels >> (self.levels() - level)
    }

    pub fn vocab(&self) -> usize {
        self.codebook_size + self.masked_codebook_size
    }

    pub(crate) fn write(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.set(&format!("{prefix}.patch_size"), self.patch_size);
        ck.set(&format!("{prefix}.feature_dim"), self.feature_dim);
        ck.set(&format!("{prefix}.codebook_size"), self.codebook_size);
        ck.set(&format!("{prefix}.masked_codebook_size"), self.masked_codebook_size);
        ck.set(&format!("{prefix}.height"), self.height);
        ck.set(&format!("{prefix}.width"), self.width);
        ck.set(&format!("{prefix}.in_channels"), self.in_channels);
        ck.set(&format!("{prefix}.commitment_beta"), self.commitment_beta);
        ck.set(&format!("{prefix}.decoder_channels"), self.decoder_channels);
        ck.set(&format!("{prefix}.res_blocks"), self.res_blocks);
        ck.set(&format!("{prefix}.reference_branch"), self.reference_branch);
    }

    pub(crate) fn read(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let k = |name: &str| format!("{prefix}.{name}");
        let cfg = Self {
            patch_size: ck.parse(&k("patch_size"))?,
            feature_dim: ck.parse(&k("feature_dim"))?,
            codebook_size: ck.parse(&k("codebook_size"))?,
            masked_codebook_size: ck.parse(&k("masked_codebook_size"))?,
            height: ck.parse(&k("height"))?,
            width: ck.parse(&k("width"))?,
            in_channels: ck.parse(&k("in_channels"))?,
            commitment_beta: ck.parse(&k("commitment_beta"))?,
            decoder_channels: ck.parse(&k("decoder_channels"))?,
            res_blocks: ck.parse(&k("res_blocks"))?,
            reference_branch: ck.parse(&k("reference_branch"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rejects any field of `self` that differs from `expected`, naming both values.
    pub fn expect_matches(&self, expected: &PvqvaeConfig) -> Result<()> {
        let pairs = [
            ("patch_size", self.patch_size, expected.patch_size),
            ("feature_dim", self.feature_dim, expected.feature_dim),
            ("codebook_size", self.codebook_size, expected.codebook_size),
            ("masked_codebook_size", self.masked_codebook_size, expected.masked_codebook_size),
            ("height", self.height, expected.height),
            ("width", self.width, expected.width),
            ("in_channels", self.in_channels, expected.in_channels),
            ("decoder_channels", self.decoder_channels, expected.decoder_channels),
            ("res_blocks", self.res_blocks, expected.res_blocks),
        ];
        for (key, found, want) in pairs {
            if found != want {
                return Err(Error::ConfigMismatch {
                    key: key.into(),
                    expected: want.to_string(),
                    found: found.to_string(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        PvqvaeConfig::full().validate().unwrap();
        PvqvaeConfig::toy().validate().unwrap();
        assert_eq!(PvqvaeConfig::full().grid(), (32, 32));
        assert_eq!(PvqvaeConfig::full().patch_len(), 192);
    }

    #[test]
    fn invariants_enforced() {
        let mut c = PvqvaeConfig::toy();
        c.height = 30;
        assert!(c.validate().is_err());
        let mut c = PvqvaeConfig::toy();
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = PvqvaeConfig::toy();
        c.codebook_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn channel_ladder() {
        let c = PvqvaeConfig::toy();
        assert_eq!((c.channels_at(2), c.channels_at(1), c.channels_at(0)), (32, 16, 8));
    }
}
