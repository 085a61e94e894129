//! Optional semantic and sketch maps that steer inpainting.

use std::path::Path;

use super::image::{load_gray, GrayMap, Image};
use crate::error::{Error, Result};

/// Known-category count when not configured.
pub const DEFAULT_CATEGORIES: usize = 133;
/// Reserved unknown-category ids, `[C, C + U)`.
pub const DEFAULT_UNKNOWN: usize = 20;

/// Per-pixel category ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u16>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::SizeMismatch {
                expected: format!("{height}x{width} semantic map"),
                found: format!("{} ids", ids.len()),
            });
        }
        Ok(Self { height, width, ids })
    }

    pub fn check_range(&self, limit: usize) -> Result<()> {
        if let Some(&id) = self.ids.iter().find(|&&v| usize::from(v) >= limit) {
            return Err(Error::InvalidCondition(format!(
                "semantic id {id} outside [0, {limit})"
            )));
        }
        Ok(())
    }

    /// `H×W×classes` one-hot planes.
    pub fn one_hot(&self, classes: usize) -> Result<Image> {
        self.check_range(classes)?;
        let mut data = vec![0.0; self.height * self.width * classes];
        for (i, &id) in self.ids.iter().enumerate() {
            data[i * classes + usize::from(id)] = 1.0;
        }
        Image::new(self.height, self.width, classes, data)
    }

    pub fn from_gray(map: &GrayMap) -> Self {
        Self {
            height: map.height,
            width: map.width,
            ids: map.data.iter().map(|&v| u16::from(v)).collect(),
        }
    }

    pub fn to_gray(&self) -> Result<GrayMap> {
        let data = self
            .ids
            .iter()
            .map(|&v| u8::try_from(v).map_err(|_| Error::InvalidCondition(format!("id {v} does not fit a byte"))))
            .collect::<Result<_>>()?;
        Ok(GrayMap {
            height: self.height,
            width: self.width,
            data,
        })
    }
}

/// Binary structure map; `true` marks a stroke.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SketchMap {
    pub height: usize,
    pub width: usize,
    pub on: Vec<bool>,
}

impl SketchMap {
    pub fn from_gray(map: &GrayMap) -> Result<Self> {
        let max = map.data.iter().copied().max().unwrap_or(0);
        let hi = if max <= 1 { 1 } else { 255 };
        if map.data.iter().any(|&v| v != 0 && v != hi) {
            return Err(Error::InvalidCondition("sketch maps must be binary".into()));
        }
        Ok(Self {
            height: map.height,
            width: map.width,
            on: map.data.iter().map(|&v| v == hi).collect(),
        })
    }

    pub fn to_gray(&self) -> GrayMap {
        GrayMap {
            height: self.height,
            width: self.width,
            data: self.on.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    pub fn to_image(&self) -> Image {
        Image::new(
            self.height,
            self.width,
            1,
            self.on.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("sizes agree by construction")
    }
}

/// Conditions supplied with an inpainting request; `None` means absent.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConditionSet {
    pub semantic: Option<SemanticMap>,
    pub sketch: Option<SketchMap>,
}

impl ConditionSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_none() && self.sketch.is_none()
    }

    /// Shapes must match the image; semantic ids must be below `classes`.
    pub fn validate(&self, height: usize, width: usize, classes: usize) -> Result<()> {
        if let Some(s) = &self.semantic {
            if (s.height, s.width) != (height, width) {
                return Err(Error::SizeMismatch {
                    expected: format!("{height}x{width}"),
                    found: format!("{}x{} semantic map", s.height, s.width),
                });
            }
            s.check_range(classes)?;
        }
        if let Some(s) = &self.sketch {
            if (s.height, s.width) != (height, width) {
                return Err(Error::SizeMismatch {
                    expected: format!("{height}x{width}"),
                    found: format!("{}x{} sketch map", s.height, s.width),
                });
            }
        }
        Ok(())
    }
}

pub fn load_semantic(path: impl AsRef<Path>) -> Result<SemanticMap> {
    Ok(SemanticMap::from_gray(&load_gray(path)?))
}

pub fn load_sketch(path: impl AsRef<Path>) -> Result<SketchMap> {
    SketchMap::from_gray(&load_gray(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_planes() {
        let m = SemanticMap::new(1, 2, vec![2, 0]).unwrap();
        let img = m.one_hot(3).unwrap();
        assert_eq!(img.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(m.one_hot(2).is_err());
    }

    #[test]
    fn validation() {
        let c = ConditionSet {
            semantic: Some(SemanticMap::new(2, 2, vec![0, 1, 2, 3]).unwrap()),
            sketch: None,
        };
        assert!(c.validate(2, 2, 4).is_ok());
        assert!(c.validate(2, 2, 3).is_err());
        assert!(c.validate(4, 1, 4).is_err());
    }
}
