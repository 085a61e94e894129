//! Corpus directories and the synthetic toy corpus.

use std::path::{Path, PathBuf};

use rand::Rng;

use super::conditions::{SemanticMap, SketchMap};
use super::image::{load_image, Image};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Every PNG/PPM under `dir` (not recursive), sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "ppm")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every image of a corpus directory; all must share one size.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, Image)>> {
    let paths = list_images(&dir)?;
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "corpus {} contains no png/ppm images",
            dir.as_ref().display()
        )));
    }
    let mut out: Vec<(PathBuf, Image)> = Vec::with_capacity(paths.len());
    for p in paths {
        let img = load_image(&p)?;
        if let Some((first, f)) = out.first() {
            if (f.height(), f.width()) != (img.height(), img.width()) {
                return Err(Error::SizeMismatch {
                    expected: format!("{}x{} (from {})", f.height(), f.width(), first.display()),
                    found: format!("{}x{} ({})", img.height(), img.width(), p.display()),
                });
            }
        }
        out.push((p, img));
    }
    Ok(out)
}

/// Colours used by the toy corpus; the index doubles as the semantic id.
pub const TOY_PALETTE: [[f32; 3]; 8] = [
    [0.10, 0.10, 0.12],
    [0.90, 0.90, 0.85],
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.30],
    [0.20, 0.35, 0.85],
    [0.95, 0.80, 0.20],
    [0.60, 0.30, 0.70],
    [0.30, 0.75, 0.80],
];

/// One synthetic image with its ground-truth condition maps.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub image: Image,
    pub semantic: SemanticMap,
    pub sketch: SketchMap,
}

/// Flat background plus one to three axis-aligned rectangles in palette colours.
pub fn toy_sample(height: usize, width: usize, rng: &mut impl Rng) -> ToySample {
    let mut ids = vec![rng.random_range(0..TOY_PALETTE.len()) as u16; height * width];
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let colour = rng.random_range(0..TOY_PALETTE.len()) as u16;
        let h = rng.random_range(height / 5..=height / 2).max(1);
        let w = rng.random_range(width / 5..=width / 2).max(1);
        let y0 = rng.random_range(0..=height - h);
        let x0 = rng.random_range(0..=width - w);
        for y in y0..y0 + h {
            ids[y * width + x0..y * width + x0 + w].fill(colour);
        }
    }
    let image = Image::from_fn(height, width, 3, |y, x, c| TOY_PALETTE[usize::from(ids[y * width + x])][c]);
    let on = (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            (y + 1 < height && ids[i] != ids[i + width]) || (x + 1 < width && ids[i] != ids[i + 1])
        })
        .collect();
    ToySample {
        image,
        semantic: SemanticMap { height, width, ids },
        sketch: SketchMap { height, width, on },
    }
}

/// `n` reproducible toy samples.
pub fn toy_corpus(n: usize, height: usize, width: usize, seed: u64) -> Vec<ToySample> {
    (0..n)
        .map(|i| toy_sample(height, width, &mut stream(seed, &[0x70_79, i as u64])))
        .collect()
}
