use put_tensor::Tensor;
use rand_chacha::ChaCha8Rng;

use super::models::PutModels;
use super::select::{iteration_count, replace_features, select_patches, truncate_and_sample, K1};
use crate::error::{Error, Result};
use crate::io::{ConditionSet, Image, Mask};
use crate::pvqvae::{composite, MaskedImage, Provenance, TokenGrid};
use crate::rng::stream;
use crate::transformer::ConditionFeatures;

/// Result of one sampler iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Cells filled in this iteration, most confident first.
    pub filled: Vec<usize>,
    pub complete: bool,
}

/// Incremental inpainting state of one sample.
#[derive(Clone, Debug)]
pub struct SamplingSession {
    reference: MaskedImage,
    features: Tensor,
    ratios: Vec<f32>,
    grid: TokenGrid,
    masked: Vec<usize>,
    conditions: ConditionFeatures,
    rng: ChaCha8Rng,
    trace: Vec<Vec<usize>>,
}

impl SamplingSession {
    /// Encodes `image ⊗ mask` and tokenizes it; `rng` drives every draw of this sample.
    pub fn new(
        models: &PutModels,
        image: &Image,
        mask: &Mask,
        conditions: ConditionFeatures,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let reference = models.pvqvae.mask_image(image, mask)?;
        let (grid, features) = models.pvqvae.tokenize(&reference)?;
        let ratios = reference.cell_ratios().to_vec();
        let masked = reference.masked_cells();
        Ok(Self {
            reference,
            features,
            ratios,
            grid,
            masked,
            conditions,
            rng,
            trace: Vec::new(),
        })
    }

    /// Session for sample `index` with the per-sample stream of `seed`.
    pub fn for_sample(
        models: &PutModels,
        image: &Image,
        mask: &Mask,
        conditions: &ConditionSet,
        seed: u64,
        index: usize,
    ) -> Result<Self> {
        let features = models.condition_features(conditions)?;
        Self::new(models, image, mask, features, stream(seed, &[index as u64]))
    }

    pub fn grid(&self) -> &TokenGrid {
        &self.grid
    }

    pub fn reference(&self) -> &MaskedImage {
        &self.reference
    }

    /// `Π`: cells with any missing pixel.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// `Π − Π̄^I` in row-major order.
    pub fn remaining(&self) -> Vec<usize> {
        self.masked
            .iter()
            .copied()
            .filter(|&c| self.grid.provenance[c] == Provenance::MaskedPending)
            .collect()
    }

    /// Cells filled so far, in the order they were filled.
    pub fn inpainted(&self) -> Vec<usize> {
        self.trace.iter().flatten().copied().collect()
    }

    pub fn is_complete(&self) -> bool {
        self.grid.pending() == 0
    }

    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    pub fn expected_iterations(&self, k1: K1) -> usize {
        iteration_count(self.masked.len(), k1)
    }

    /// Per-iteration filled cells.
    pub fn trace(&self) -> &[Vec<usize>] {
        &self.trace
    }

    /// Transformer input: retrieved vectors at inpainted cells, which count
    /// as fully known, original features elsewhere.
    pub fn current_input(&self, models: &PutModels) -> Result<(Tensor, Vec<f32>)> {
        let filled: Vec<(usize, usize)> = self.inpainted().into_iter().map(|c| (c, self.grid.tokens[c])).collect();
        let features = replace_features(&self.features, &filled, models.pvqvae.codebook())?;
        let mut ratios = self.ratios.clone();
        for &(c, _) in &filled {
            ratios[c] = 1.0;
        }
        Ok((features, ratios))
    }

    /// `p̂` for the current state.
    pub fn probabilities(&self, models: &PutModels) -> Result<Tensor> {
        let (features, ratios) = self.current_input(models)?;
        models.transformer.probabilities(&features, &ratios, &self.conditions)
    }

    /// One multi-token iteration: pick the `K1` most confident remaining
    /// cells and draw each token independently from its top-`K2` likelihood.
    pub fn step(&mut self, models: &PutModels, k1: K1, k2: usize) -> Result<StepOutcome> {
        if self.is_complete() {
            return Err(Error::SessionComplete);
        }
        let probs = self.probabilities(models)?;
        let filled = select_patches(&probs, &self.remaining(), k1)?;
        let mut order = filled.clone();
        order.sort_unstable();
        for &c in &order {
            let token = truncate_and_sample(probs.row(c), k2, &mut self.rng)?;
            self.grid.tokens[c] = token;
            self.grid.provenance[c] = Provenance::Inpainted;
        }
        self.trace.push(filled.clone());
        Ok(StepOutcome {
            iteration: self.trace.len(),
            filled,
            complete: self.is_complete(),
        })
    }

    /// Steps until no masked cell is pending.
    pub fn run(&mut self, models: &PutModels, k1: K1, k2: usize) -> Result<()> {
        while !self.is_complete() {
            self.step(models, k1, k2)?;
        }
        Ok(())
    }

    /// Codebook rows of the current grid; pending cells keep their `e′` row.
    pub fn quantized(&self, models: &PutModels) -> Result<Tensor> {
        models.pvqvae.codebook().lookup(&self.grid.tokens)
    }

    /// Guided decode of the current grid, composited with the kept pixels.
    pub fn render(&self, models: &PutModels) -> Result<Image> {
        let q = self.quantized(models)?;
        models.pvqvae.decode(&q, &self.reference)
    }

    /// [`Self::render`] with missing pixels of still-pending cells painted white.
    pub fn preview(&self, models: &PutModels) -> Result<Image> {
        let mut img = self.render(models)?;
        let r = models.pvqvae.config().patch_size;
        let gw = self.grid.width;
        let c = img.channels();
        let w = img.width();
        let keep = self.reference.mask().keep().to_vec();
        for cell in self.remaining() {
            let (gy, gx) = (cell / gw, cell % gw);
            for y in gy * r..(gy + 1) * r {
                for x in gx * r..(gx + 1) * r {
                    if !keep[y * w + x] {
                        img.data_mut()[(y * w + x) * c..(y * w + x + 1) * c].fill(1.0);
                    }
                }
            }
        }
        Ok(img)
    }

    /// Final image; the session must be complete.
    pub fn finish(&self, models: &PutModels) -> Result<Image> {
        if !self.is_complete() {
            return Err(Error::InvalidArgument(format!(
                "{} cells still pending",
                self.grid.pending()
            )));
        }
        if self.masked.is_empty() {
            return composite(self.reference.pixels(), &self.reference);
        }
        self.render(models)
    }
}
