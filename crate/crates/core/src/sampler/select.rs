use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use put_tensor::Tensor;
use rand::Rng;

use crate::error::{Error, Result};
use crate::pvqvae::DualCodebook;

/// Number of cells filled per iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum K1 {
    /// Every remaining cell in one iteration.
    All,
    Top(usize),
}

impl K1 {
    pub fn budget(self, remaining: usize) -> usize {
        match self {
            K1::All => remaining,
            K1::Top(k) => k.min(remaining),
        }
    }
}

impl fmt::Display for K1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            K1::All => write!(f, "all"),
            K1::Top(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for K1 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(K1::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(K1::Top(k)),
            _ => Err(Error::InvalidArgument(format!("k1 must be a positive integer or \"all\", got {s:?}"))),
        }
    }
}

/// `⌈masked / K1⌉`; a single iteration for `K1 = ALL`, none when nothing is masked.
pub fn iteration_count(masked: usize, k1: K1) -> usize {
    match (masked, k1) {
        (0, _) => 0,
        (_, K1::All) => 1,
        (m, K1::Top(k)) => m.div_ceil(k.max(1)),
    }
}

/// Descending by value, lowest index first among equals.
fn by_confidence(a: (usize, f32), b: (usize, f32)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `min(K1, |remaining|)` remaining cells with the largest `max_k p̂`,
/// most confident first; ties go to the lower row-major index.
pub fn select_patches(probs: &Tensor, remaining: &[usize], k1: K1) -> Result<Vec<usize>> {
    if probs.ndim() != 2 {
        return Err(Error::SizeMismatch {
            expected: "[cells, K] probabilities".into(),
            found: format!("{:?}", probs.shape()),
        });
    }
    let rows = probs.shape()[0];
    let mut scored = Vec::with_capacity(remaining.len());
    for &c in remaining {
        if c >= rows {
            return Err(Error::InvalidArgument(format!("cell {c} outside a {rows}-cell grid")));
        }
        let conf = probs.row(c).iter().copied().fold(f32::NEG_INFINITY, f32::max);
        scored.push((c, conf));
    }
    scored.sort_by(|&a, &b| by_confidence(a, b));
    scored.truncate(k1.budget(remaining.len()));
    Ok(scored.into_iter().map(|(c, _)| c).collect())
}

/// Keeps the `K2` most likely entries (lowest index wins ties), renormalizes
/// and draws one token. `K2 = 1` returns the argmax without touching `rng`.
pub fn truncate_and_sample(dist: &[f32], k2: usize, rng: &mut impl Rng) -> Result<usize> {
    if k2 == 0 {
        return Err(Error::InvalidArgument("k2 must be at least 1".into()));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Degenerate("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = dist.iter().map(|&p| f64::from(p)).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all-zero distribution".into()));
    }
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::Degenerate(format!("distribution sums to {total}, not 1")));
    }
    let mut idx: Vec<(usize, f32)> = dist.iter().copied().enumerate().collect();
    let k2 = k2.min(idx.len());
    if k2 < idx.len() {
        idx.select_nth_unstable_by(k2 - 1, |&a, &b| by_confidence(a, b));
        idx.truncate(k2);
    }
    if k2 == 1 {
        return Ok(idx[0].0);
    }
    idx.sort_by_key(|&(i, _)| i);
    let kept: f64 = idx.iter().map(|&(_, p)| f64::from(p)).sum();
    if kept <= 0.0 {
        // Every retained entry is zero; fall back to the first of them.
        return Ok(idx[0].0);
    }
    let u = rng.random::<f64>() * kept;
    let mut acc = 0.0;
    for &(i, p) in &idx {
        acc += f64::from(p);
        if u < acc {
            return Ok(i);
        }
    }
    Ok(idx.iter().rev().find(|&&(_, p)| p > 0.0).map(|&(i, _)| i).unwrap_or(idx[0].0))
}

/// Exact distribution sampled by [`truncate_and_sample`].
pub fn truncated_distribution(dist: &[f32], k2: usize) -> Vec<f64> {
    let mut idx: Vec<(usize, f32)> = dist.iter().copied().enumerate().collect();
    idx.sort_by(|&a, &b| by_confidence(a, b));
    idx.truncate(k2.max(1));
    let kept: f64 = idx.iter().map(|&(_, p)| f64::from(p)).sum();
    let mut out = vec![0.0; dist.len()];
    for (i, p) in idx {
        out[i] = f64::from(p) / kept;
    }
    out
}

/// `R(f̂, ê^I)`: rows of `features` at inpainted cells replaced by the `e`
/// rows of their tokens.
pub fn replace_features(features: &Tensor, inpainted: &[(usize, usize)], codebook: &DualCodebook) -> Result<Tensor> {
    let rows = features.shape().first().copied().unwrap_or(0);
    if features.ndim() != 2 || features.shape()[1] != codebook.dim() {
        return Err(Error::SizeMismatch {
            expected: format!("[cells, {}] features", codebook.dim()),
            found: format!("{:?}", features.shape()),
        });
    }
    let d = codebook.dim();
    let mut out = features.clone();
    for &(cell, token) in inpainted {
        if token >= codebook.k() {
            return Err(Error::TokenOutOfRange {
                token,
                limit: codebook.k(),
            });
        }
        if cell >= rows {
            return Err(Error::InvalidArgument(format!("cell {cell} outside a {rows}-cell grid")));
        }
        out.data_mut()[cell * d..(cell + 1) * d].copy_from_slice(codebook.row(token)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn k1_parsing() {
        assert_eq!("all".parse::<K1>().unwrap(), K1::All);
        assert_eq!("20".parse::<K1>().unwrap(), K1::Top(20));
        assert!("0".parse::<K1>().is_err());
        assert_eq!(K1::Top(7).to_string(), "7");
    }

    #[test]
    fn ordered_selection() {
        let probs = Tensor::new([3, 2], vec![0.1, 0.9, 0.5, 0.5, 0.9, 0.1]).unwrap();
        let remaining = [0, 1, 2];
        let mut sel = select_patches(&probs, &remaining, K1::Top(2)).unwrap();
        sel.sort();
        assert_eq!(sel, vec![0, 2]);
    }

    #[test]
    fn k2_one_is_argmax() {
        let mut rng = stream(0, &[]);
        assert_eq!(truncate_and_sample(&[0.2, 0.5, 0.3], 1, &mut rng).unwrap(), 1);
        assert!(truncate_and_sample(&[0.0, 0.0], 1, &mut rng).is_err());
    }
}
