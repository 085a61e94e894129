use put_tensor::{Bound, Params, Tape, Tensor, Var};
use rand::Rng;

use super::config::PvqvaeConfig;
use super::masked::RatioMap;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ResBlock};

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv2d,
    blocks: Vec<ResBlock>,
}

impl Stage {
    fn new(params: &mut Params, name: &str, cin: usize, cout: usize, blocks: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(params, &format!("{name}.conv"), cin, cout, 3, rng),
            blocks: (0..blocks)
                .map(|b| ResBlock::new(params, &format!("{name}.res{b}"), cout, rng))
                .collect(),
        }
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = self.conv.forward(tape, bound, x)?;
        for b in &self.blocks {
            h = b.forward(tape, bound, h)?;
        }
        Ok(h)
    }
}

/// Multi-scale decoder. The main branch upsamples quantized features; the
/// optional reference branch extracts features from the masked image at the
/// same scales, fused in at every level by [`mga_fuse_var`].
#[derive(Clone, Debug)]
pub struct Decoder {
    input: Conv2d,
    /// `up[i]` takes level `L − i` to level `L − i − 1`.
    up: Vec<Stage>,
    output: Conv2d,
    /// `reference[l]` produces level-`l` reference features.
    reference: Option<Vec<Stage>>,
}

impl Decoder {
    pub fn new(params: &mut Params, cfg: &PvqvaeConfig, rng: &mut impl Rng) -> Self {
        let levels = cfg.levels();
        let input = Conv2d::new(params, "dec.in", cfg.feature_dim, cfg.channels_at(levels), 1, rng);
        let up = (0..levels)
            .map(|i| {
                let l = levels - i;
                Stage::new(
                    params,
                    &format!("dec.up{i}"),
                    cfg.channels_at(l),
                    cfg.channels_at(l - 1),
                    cfg.res_blocks,
                    rng,
                )
            })
            .collect();
        let output = Conv2d::new(params, "dec.out", cfg.channels_at(0), cfg.in_channels, 3, rng);
        let reference = cfg.reference_branch.then(|| {
            (0..=levels)
                .map(|l| {
                    let cin = if l == 0 { cfg.in_channels } else { cfg.channels_at(l - 1) };
                    Stage::new(params, &format!("dec.ref{l}"), cin, cfg.channels_at(l), cfg.res_blocks, rng)
                })
                .collect()
        });
        Self {
            input,
            up,
            output,
            reference,
        }
    }

    pub fn has_reference(&self) -> bool {
        self.reference.is_some()
    }

    /// Reference features for levels `0..=L` from a `1×C×H×W` masked image.
    fn reference_features(&self, tape: &mut Tape, bound: &Bound, image: Var) -> Result<Vec<Var>> {
        let stages = self
            .reference
            .as_ref()
            .ok_or_else(|| Error::Config("decoder has no reference branch".into()))?;
        let mut feats: Vec<Var> = Vec::with_capacity(stages.len());
        for (l, stage) in stages.iter().enumerate() {
            let x = if l == 0 {
                image
            } else {
                let prev = *feats.last().expect("level l-1 present");
                tape.downsample_nearest2x(prev)?
            };
            feats.push(stage.forward(tape, bound, x)?);
        }
        Ok(feats)
    }

    /// `z` is `1×D×h×w`. With a reference, `image` is the masked image as
    /// `1×C×H×W` and `ratios` its pyramid (levels `0..=L`). Returns the raw
    /// decoded image `1×C×H×W` in `(0, 1)`, before compositing.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        reference: Option<(Var, &[RatioMap])>,
    ) -> Result<Var> {
        let levels = self.up.len();
        let refs = match reference {
            Some((img, ratios)) => {
                if ratios.len() != levels + 1 {
                    return Err(Error::SizeMismatch {
                        expected: format!("{} pyramid levels", levels + 1),
                        found: ratios.len().to_string(),
                    });
                }
                Some((self.reference_features(tape, bound, img)?, ratios))
            }
            None => None,
        };
        let mut x = self.input.forward(tape, bound, z)?;
        for (i, stage) in self.up.iter().enumerate() {
            let l = levels - i;
            if let Some((feats, ratios)) = &refs {
                x = mga_fuse_var(tape, x, feats[l], &ratios[l])?;
            }
            let up = tape.upsample_nearest2x(x)?;
            x = stage.forward(tape, bound, up)?;
        }
        if let Some((feats, ratios)) = &refs {
            x = mga_fuse_var(tape, x, feats[0], &ratios[0])?;
        }
        let x = tape.relu(x)?;
        let x = self.output.forward(tape, bound, x)?;
        Ok(tape.sigmoid(x)?)
    }
}

fn fuse_mask(shape: &[usize], ratios: &RatioMap) -> Result<Vec<bool>> {
    if shape.len() != 4 || shape[0] != 1 || shape[2] != ratios.height || shape[3] != ratios.width {
        return Err(Error::SizeMismatch {
            expected: format!("[1, C, {}, {}] features", ratios.height, ratios.width),
            found: format!("{shape:?}"),
        });
    }
    let full = ratios.fully_kept();
    Ok((0..shape[1]).flat_map(|_| full.iter().copied()).collect())
}

/// Mask-guided addition on the tape: reference features where the cell is
/// fully kept, main-branch features elsewhere.
pub fn mga_fuse_var(tape: &mut Tape, main: Var, reference: Var, ratios: &RatioMap) -> Result<Var> {
    if tape.shape(main) != tape.shape(reference) {
        return Err(Error::Tensor(put_tensor::TensorError::ShapeMismatch {
            op: "mga_fuse",
            lhs: tape.shape(main).to_vec(),
            rhs: tape.shape(reference).to_vec(),
        }));
    }
    let sel = fuse_mask(tape.shape(main), ratios)?;
    Ok(tape.select(&sel, reference, main)?)
}

/// `(1 − int[m↓,l]) ⊗ main ⊕ int[m↓,l] ⊗ reference` for `1×C×h×w` features.
pub fn mga_fuse(main: &Tensor, reference: &Tensor, ratios: &RatioMap) -> Result<Tensor> {
    if main.shape() != reference.shape() {
        return Err(Error::Tensor(put_tensor::TensorError::ShapeMismatch {
            op: "mga_fuse",
            lhs: main.shape().to_vec(),
            rhs: reference.shape().to_vec(),
        }));
    }
    let sel = fuse_mask(main.shape(), ratios)?;
    let data = sel
        .iter()
        .zip(main.data().iter().zip(reference.data()))
        .map(|(&s, (&m, &r))| if s { r } else { m })
        .collect();
    Ok(Tensor::new(main.shape().to_vec(), data)?)
}
