use crate::error::{Error, Result};
use crate::io::{Image, Mask};

/// Per-cell fraction of kept pixels at one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RatioMap {
    /// `int[·]`: true exactly where the ratio is 1.
    pub fn fully_kept(&self) -> Vec<bool> {
        self.data.iter().map(|&r| r == 1.0).collect()
    }

    fn pool(&self) -> RatioMap {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.data[(2 * y + dy) * self.width + 2 * x + dx];
                data.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
        RatioMap {
            height: h,
            width: w,
            data,
        }
    }
}

/// `x̂ = x ⊗ m` together with `m` and its ratio pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    pixels: Image,
    mask: Mask,
    ratios: Vec<RatioMap>,
}

impl MaskedImage {
    /// Builds levels `0..=log2(patch_size)`; level 0 is the mask itself.
    pub fn new(image: &Image, mask: &Mask, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || !patch_size.is_power_of_two() {
            return Err(Error::Config(format!("patch_size {patch_size} must be a power of two")));
        }
        let (h, w) = (image.height(), image.width());
        if h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::SizeMismatch {
                expected: format!("image sides divisible by {patch_size}"),
                found: format!("{h}x{w}"),
            });
        }
        let pixels = mask.apply(image)?;
        let mut ratios = vec![RatioMap {
            height: h,
            width: w,
            data: mask.keep().iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        }];
        for _ in 0..patch_size.trailing_zeros() {
            let next = ratios.last().expect("level 0 exists").pool();
            ratios.push(next);
        }
        Ok(Self {
            pixels,
            mask: mask.clone(),
            ratios,
        })
    }

    /// Image with nothing missing.
    pub fn unmasked(image: &Image, patch_size: usize) -> Result<Self> {
        Self::new(image, &Mask::full(image.height(), image.width()), patch_size)
    }

    pub fn pixels(&self) -> &Image {
        &self.pixels
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn level(&self, l: usize) -> &RatioMap {
        &self.ratios[l]
    }

    pub fn levels(&self) -> &[RatioMap] {
        &self.ratios
    }

    /// `m↓`: the coarsest level, one ratio per patch.
    pub fn cell_ratios(&self) -> &[f32] {
        &self.ratios.last().expect("at least level 0").data
    }

    /// Row-major indices of cells that are not fully kept.
    pub fn masked_cells(&self) -> Vec<usize> {
        self.cell_ratios()
            .iter()
            .enumerate()
            .filter(|(_, &r)| r < 1.0)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Unmasked,
    MaskedPending,
    Inpainted,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Unmasked => "unmasked",
            Provenance::MaskedPending => "masked_pending",
            Provenance::Inpainted => "inpainted",
        }
    }
}

/// Token per grid cell plus where it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl TokenGrid {
    /// Provenance follows the cell ratios: fully kept cells are unmasked, the
    /// rest are pending.
    pub fn from_quantized(height: usize, width: usize, tokens: Vec<usize>, ratios: &[f32]) -> Self {
        let provenance = ratios
            .iter()
            .map(|&r| if r == 1.0 { Provenance::Unmasked } else { Provenance::MaskedPending })
            .collect();
        Self {
            height,
            width,
            tokens,
            provenance,
        }
    }

    pub fn pending(&self) -> usize {
        self.provenance.iter().filter(|&&p| p == Provenance::MaskedPending).count()
    }

    /// Whitespace-separated token rows, then provenance rows (u, p, i).
    pub fn dump(&self) -> String {
        let mut s = format!("grid {} {}\n", self.height, self.width);
        for row in self.tokens.chunks(self.width) {
            s.push_str(&row.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
            s.push('\n');
        }
        for row in self.provenance.chunks(self.width) {
            let r: String = row
                .iter()
                .map(|p| match p {
                    Provenance::Unmasked => 'u',
                    Provenance::MaskedPending => 'p',
                    Provenance::Inpainted => 'i',
                })
                .collect();
            s.push_str(&r);
            s.push('\n');
        }
        s
    }
}
