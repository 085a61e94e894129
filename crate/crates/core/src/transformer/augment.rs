use std::collections::BTreeSet;

use put_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::io::SemanticMap;

/// Replaces each feature row by its quantized row with probability `p`,
/// independently per cell. Returns the mixed rows and which cells were replaced.
pub fn random_quantize_inputs(
    features: &Tensor,
    quantized: &Tensor,
    p: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<bool>)> {
    if features.shape() != quantized.shape() || features.ndim() != 2 {
        return Err(Error::SizeMismatch {
            expected: format!("{:?}", features.shape()),
            found: format!("{:?}", quantized.shape()),
        });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("replacement probability {p} outside [0, 1]")));
    }
    let rows = features.shape()[0];
    let mut out = features.clone();
    let mut replaced = Vec::with_capacity(rows);
    for r in 0..rows {
        let hit = rng.random_bool(p);
        if hit {
            let cols = features.shape()[1];
            out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(quantized.row(r));
        }
        replaced.push(hit);
    }
    Ok((out, replaced))
}

/// Remaps `n` randomly chosen known categories, each to its own unused
/// unknown id in `[C, C + U)`. `n` is uniform over `0..=min(free unknown ids,
/// known categories present)`. Returns the new map and the `(from, to)` pairs.
pub fn substitute_unknown_categories(
    map: &SemanticMap,
    categories: usize,
    unknown: usize,
    rng: &mut impl Rng,
) -> Result<(SemanticMap, Vec<(u16, u16)>)> {
    if unknown == 0 {
        return Err(Error::InvalidArgument("at least one unknown category is required".into()));
    }
    map.check_range(categories + unknown)?;
    let present: BTreeSet<u16> = map.ids.iter().copied().collect();
    let known: Vec<u16> = present.iter().copied().filter(|&v| usize::from(v) < categories).collect();
    let free: Vec<u16> = (categories..categories + unknown)
        .map(|v| v as u16)
        .filter(|v| !present.contains(v))
        .collect();
    let n = rng.random_range(0..=known.len().min(free.len()));
    let mut from = known;
    from.shuffle(rng);
    from.truncate(n);
    let mut to = free;
    to.shuffle(rng);
    to.truncate(n);
    let pairs: Vec<(u16, u16)> = from.into_iter().zip(to).collect();
    let mut out = map.clone();
    for id in &mut out.ids {
        if let Some(&(_, t)) = pairs.iter().find(|(f, _)| f == id) {
            *id = t;
        }
    }
    Ok((out, pairs))
}
