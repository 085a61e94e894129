//! Image and token quality metrics.

use put_tensor::Tensor;

use super::image::Image;
use super::mask::Mask;
use crate::error::{Error, Result};

/// Reported instead of `+∞` when two images are identical.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenMetrics {
    pub acc_at_max_prob: f64,
    pub prob_at_gt: f64,
    pub cells: usize,
}

/// Pixel indices (not channel indices) that take part in a comparison.
fn region(a: &Image, region: Option<&Mask>) -> Result<Vec<usize>> {
    let n = a.height() * a.width();
    match region {
        None => Ok((0..n).collect()),
        Some(m) => {
            m.check_size(a.height(), a.width())?;
            Ok((0..n).filter(|&i| !m.keep()[i]).collect())
        }
    }
}

fn sq_and_abs(a: &Image, b: &Image, pixels: &[usize]) -> (f64, f64, usize) {
    let c = a.channels();
    let (mut sq, mut ab) = (0.0f64, 0.0f64);
    for &p in pixels {
        for k in 0..c {
            let d = f64::from(a.data()[p * c + k]) - f64::from(b.data()[p * c + k]);
            sq += d * d;
            ab += d.abs();
        }
    }
    (sq, ab, pixels.len() * c)
}

/// PSNR for values in `[0, 1]`. With `hole`, only missing pixels of the mask count.
pub fn psnr(a: &Image, b: &Image, hole: Option<&Mask>) -> Result<f64> {
    a.same_size(b)?;
    let pixels = region(a, hole)?;
    let (sq, _, n) = sq_and_abs(a, b, &pixels);
    if n == 0 || sq == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * (sq / n as f64).log10()).min(PSNR_CAP))
}

pub fn l1(a: &Image, b: &Image, hole: Option<&Mask>) -> Result<f64> {
    a.same_size(b)?;
    let pixels = region(a, hole)?;
    let (_, ab, n) = sq_and_abs(a, b, &pixels);
    Ok(if n == 0 { 0.0 } else { ab / n as f64 })
}

fn gaussian(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over valid Gaussian windows, averaged over channels. With `hole`,
/// only windows centred on a missing pixel count (all windows if none are).
/// Images smaller than the window use a window the size of the shorter side.
pub fn ssim(a: &Image, b: &Image, hole: Option<&Mask>) -> Result<f64> {
    a.same_size(b)?;
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("ssim of an empty image".into()));
    }
    if let Some(m) = hole {
        m.check_size(h, w)?;
    }
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian(size);
    let half = size / 2;
    let centres: Vec<(usize, usize)> = (0..=h - size)
        .flat_map(|y| (0..=w - size).map(move |x| (y, x)))
        .collect();
    let selected: Vec<(usize, usize)> = match hole {
        Some(m) => {
            let s: Vec<_> = centres
                .iter()
                .copied()
                .filter(|&(y, x)| !m.get(y + half, x + half))
                .collect();
            if s.is_empty() {
                centres
            } else {
                s
            }
        }
        None => centres,
    };
    let mut total = 0.0;
    for c in 0..ch {
        let mut acc = 0.0;
        for &(y0, x0) in &selected {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..size {
                for dx in 0..size {
                    let wgt = g[dy] * g[dx];
                    let va = f64::from(a.get(y0 + dy, x0 + dx, c));
                    let vb = f64::from(b.get(y0 + dy, x0 + dx, c));
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += acc / selected.len() as f64;
    }
    Ok(total / ch as f64)
}

pub fn metrics(a: &Image, b: &Image, hole: Option<&Mask>) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr: psnr(a, b, hole)?,
        ssim: ssim(a, b, hole)?,
        l1: l1(a, b, hole)?,
    })
}

/// Acc@MaxProb and Prob@GT of a `T×K` probability table over `cells`.
pub fn token_metrics(probs: &Tensor, targets: &[usize], cells: &[usize]) -> Result<TokenMetrics> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::SizeMismatch {
            expected: format!("[{}, K] probabilities", targets.len()),
            found: format!("{s:?}"),
        });
    }
    let k = s[1];
    let (mut hits, mut mass) = (0usize, 0.0f64);
    for &cell in cells {
        let row = probs.data().get(cell * k..(cell + 1) * k).ok_or(Error::TokenOutOfRange {
            token: cell,
            limit: s[0],
        })?;
        let t = targets[cell];
        if t >= k {
            return Err(Error::TokenOutOfRange { token: t, limit: k });
        }
        if argmax(row) == t {
            hits += 1;
        }
        mass += f64::from(row[t]);
    }
    let n = cells.len();
    Ok(TokenMetrics {
        acc_at_max_prob: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        prob_at_gt: if n == 0 { 0.0 } else { mass / n as f64 },
        cells: n,
    })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
