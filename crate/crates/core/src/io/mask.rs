//! Binary masks and the stroke generator.

use std::path::Path;

use rand::Rng;

use super::image::{load_gray, GrayMap, Image};
use crate::error::{Error, Result};

/// `true` marks a kept pixel (m = 1), `false` a missing one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != height * width {
            return Err(Error::SizeMismatch {
                expected: format!("{height}x{width} mask"),
                found: format!("{} values", keep.len()),
            });
        }
        Ok(Self { height, width, keep })
    }

    /// Nothing missing.
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            keep: vec![true; height * width],
        }
    }

    /// Everything missing.
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            keep: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut keep = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                keep.push(f(y, x));
            }
        }
        Self { height, width, keep }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.keep[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, keep: bool) {
        self.keep[y * self.width + x] = keep;
    }

    /// Fraction of missing pixels, `1 − mean(m)`.
    pub fn hole_ratio(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.keep.iter().filter(|&&k| !k).count() as f64 / self.keep.len() as f64
    }

    pub fn is_full(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    /// Elementwise AND: a pixel is kept only if both masks keep it.
    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.check_size(other.height, other.width)?;
        Ok(Mask {
            height: self.height,
            width: self.width,
            keep: self.keep.iter().zip(&other.keep).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::SizeMismatch {
                expected: format!("{height}x{width}"),
                found: format!("{}x{} mask", self.height, self.width),
            });
        }
        Ok(())
    }

    /// `x ⊗ m`: zeroes every missing pixel.
    pub fn apply(&self, image: &Image) -> Result<Image> {
        self.check_size(image.height(), image.width())?;
        let c = image.channels();
        let mut out = image.clone();
        for (i, chunk) in out.data_mut().chunks_mut(c).enumerate() {
            if !self.keep[i] {
                chunk.fill(0.0);
            }
        }
        Ok(out)
    }

    /// Interprets a gray raster as a mask: 255 (or 1) keeps, 0 is missing.
    /// Any other value makes the mask non-binary and is rejected.
    pub fn from_gray(map: &GrayMap) -> Result<Self> {
        let max = map.data.iter().copied().max().unwrap_or(0);
        let on = if max <= 1 { 1 } else { 255 };
        if let Some((i, v)) = map.data.iter().enumerate().find(|(_, &v)| v != 0 && v != on) {
            return Err(Error::InvalidMask(format!(
                "pixel ({}, {}) has value {v}; masks must contain only 0 and {on}",
                i / map.width.max(1),
                i % map.width.max(1)
            )));
        }
        Ok(Self {
            height: map.height,
            width: map.width,
            keep: map.data.iter().map(|&v| v == on).collect(),
        })
    }

    pub fn to_gray(&self) -> GrayMap {
        GrayMap {
            height: self.height,
            width: self.width,
            data: self.keep.iter().map(|&k| if k { 255 } else { 0 }).collect(),
        }
    }
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Mask::from_gray(&load_gray(path)?)
}

/// Stroke geometry, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrokeParams {
    pub min_width: f64,
    pub max_width: f64,
    pub min_segment: f64,
    pub max_segment: f64,
    pub max_vertices: usize,
    pub max_attempts: usize,
}

impl StrokeParams {
    /// Widths of 5–30 px at 256×256, scaled linearly with the shorter side.
    pub fn for_size(height: usize, width: usize) -> Self {
        let s = height.min(width) as f64 / 256.0;
        let min_width = (5.0 * s).max(1.0);
        Self {
            min_width,
            max_width: (30.0 * s).max(min_width),
            min_segment: (10.0 * s).max(1.0),
            max_segment: (60.0 * s).max(2.0),
            max_vertices: 12,
            max_attempts: 200,
        }
    }
}

/// Random thick-stroke mask whose hole fraction lies in `[lo, hi]`.
pub fn generate_mask(height: usize, width: usize, ratio_range: (f64, f64), rng: &mut impl Rng) -> Result<Mask> {
    generate_mask_with(height, width, ratio_range, StrokeParams::for_size(height, width), rng)
}

pub fn generate_mask_with(
    height: usize,
    width: usize,
    (lo, hi): (f64, f64),
    p: StrokeParams,
    rng: &mut impl Rng,
) -> Result<Mask> {
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(Error::MaskGeneration(format!(
            "ratio range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::MaskGeneration("empty image".into()));
    }
    let total = (height * width) as f64;
    for _ in 0..p.max_attempts {
        let mut hole = vec![false; height * width];
        let mut holes = 0usize;
        'strokes: while (holes as f64) < lo * total {
            let mut y = rng.random_range(0.0..height as f64);
            let mut x = rng.random_range(0.0..width as f64);
            let radius = rng.random_range(p.min_width..=p.max_width) / 2.0;
            let vertices = rng.random_range(1..=p.max_vertices);
            for _ in 0..vertices {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let len = rng.random_range(p.min_segment..=p.max_segment);
                let ny = (y + len * angle.sin()).clamp(0.0, height as f64 - 1.0);
                let nx = (x + len * angle.cos()).clamp(0.0, width as f64 - 1.0);
                holes += stamp_segment(&mut hole, height, width, (y, x), (ny, nx), radius);
                (y, x) = (ny, nx);
                if holes as f64 >= lo * total {
                    break 'strokes;
                }
            }
        }
        if holes as f64 <= hi * total {
            return Ok(Mask {
                height,
                width,
                keep: hole.into_iter().map(|h| !h).collect(),
            });
        }
    }
    Err(Error::MaskGeneration(format!(
        "no {height}x{width} mask with hole ratio in [{lo}, {hi}] after {} attempts",
        p.max_attempts
    )))
}

/// Marks every pixel centre within `radius` of the segment; returns the number newly marked.
fn stamp_segment(hole: &mut [bool], h: usize, w: usize, a: (f64, f64), b: (f64, f64), radius: f64) -> usize {
    let r = radius.max(0.5);
    let y0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
    let y1 = ((a.0.max(b.0) + r).ceil() as usize).min(h - 1);
    let x0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
    let x1 = ((a.1.max(b.1) + r).ceil() as usize).min(w - 1);
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let mut added = 0;
    for py in y0..=y1 {
        for px in x0..=x1 {
            let (cy, cx) = (py as f64, px as f64);
            let t = if len2 > 0.0 {
                (((cy - a.0) * dy + (cx - a.1) * dx) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qy, qx) = (a.0 + t * dy - cy, a.1 + t * dx - cx);
            if qy * qy + qx * qx <= r * r {
                let slot = &mut hole[py * w + px];
                if !*slot {
                    *slot = true;
                    added += 1;
                }
            }
        }
    }
    added
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn hole_ratio_counts_missing() {
        let m = Mask::from_fn(2, 2, |y, _| y == 0);
        assert_eq!(m.hole_ratio(), 0.5);
    }

    #[test]
    fn gray_round_trip_and_rejection() {
        let m = Mask::from_fn(3, 3, |y, x| (y + x) % 2 == 0);
        assert_eq!(Mask::from_gray(&m.to_gray()).unwrap(), m);
        let bad = GrayMap {
            height: 1,
            width: 2,
            data: vec![0, 128],
        };
        assert!(matches!(Mask::from_gray(&bad), Err(Error::InvalidMask(_))));
        let ones = GrayMap {
            height: 1,
            width: 2,
            data: vec![0, 1],
        };
        assert_eq!(Mask::from_gray(&ones).unwrap().keep(), &[false, true]);
    }

    #[test]
    fn generated_ratio_in_range() {
        for seed in 0..20 {
            let m = generate_mask(64, 64, (0.2, 0.4), &mut stream(seed, &[])).unwrap();
            let r = m.hole_ratio();
            assert!((0.2..=0.4).contains(&r), "seed {seed}: {r}");
        }
    }

    #[test]
    fn bad_range_rejected() {
        let mut rng = stream(0, &[]);
        assert!(generate_mask(8, 8, (0.999, 1.0), &mut rng).is_err());
        assert!(generate_mask(8, 8, (0.0, 0.5), &mut rng).is_err());
        assert!(generate_mask(8, 8, (0.5, 0.4), &mut rng).is_err());
    }
}
