use put_tensor::exec::try_map_indexed;
use put_tensor::{LrSchedule, Optimizer, OptimizerConfig, Parallelism, Tape, Tensor};
use rand::Rng;

use super::augment::{random_quantize_inputs, substitute_unknown_categories};
use super::conditions::ConditionEncoders;
use super::loss::transformer_loss;
use super::model::{ConditionFeatures, UqTransformer};
use crate::error::{Error, Result};
use crate::io::mask::generate_mask;
use crate::io::{Checkpoint, ConditionSet, Image, Mask};
use crate::pvqvae::PVqVae;
use crate::rng::stream;

#[derive(Clone, Debug)]
pub struct TransformerTrainConfig {
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerConfig,
    /// Per-cell probability of feeding the quantized vector instead of `f̂`.
    pub quantize_prob: f64,
    /// Per-condition probability of swapping a given map for its placeholder.
    pub condition_drop_prob: f64,
    /// Relabel known semantic categories as unknown ones during training.
    pub substitute_unknown: bool,
    /// Hole fraction of generated masks.
    pub hole_ratio: (f64, f64),
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl TransformerTrainConfig {
    pub fn new(total_steps: u64, seed: u64) -> Self {
        Self {
            batch_size: 4,
            lr: LrSchedule::transformer(total_steps),
            optimizer: OptimizerConfig::transformer(),
            quantize_prob: 0.3,
            condition_drop_prob: 0.3,
            substitute_unknown: true,
            hole_ratio: (0.1, 0.6),
            seed,
            parallelism: Parallelism::default(),
        }
    }
}

/// One training image; a missing mask is drawn from the stroke generator.
#[derive(Clone, Debug)]
pub struct TransformerSample {
    pub image: Image,
    pub mask: Option<Mask>,
    pub conditions: ConditionSet,
}

impl TransformerSample {
    pub fn new(image: Image) -> Self {
        Self {
            image,
            mask: None,
            conditions: ConditionSet::none(),
        }
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_conditions(mut self, conditions: ConditionSet) -> Self {
        self.conditions = conditions;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerStepRecord {
    /// Update index, starting at 1.
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
    /// `|Π|` summed over the batch.
    pub masked_cells: usize,
    /// Batch elements with `|Π| = 0`.
    pub empty: usize,
    /// Given conditions replaced by placeholders in this step.
    pub semantic_dropped: usize,
    pub sketch_dropped: usize,
    pub semantic_given: usize,
    pub sketch_given: usize,
}

impl TransformerStepRecord {
    pub const CSV_HEADER: &'static str =
        "step,lr,loss,masked_cells,empty,semantic_given,semantic_dropped,sketch_given,sketch_dropped";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.loss,
            self.masked_cells,
            self.empty,
            self.semantic_given,
            self.semantic_dropped,
            self.sketch_given,
            self.sketch_dropped
        )
    }
}

/// Model inputs for one training image, prepared before the tape is built.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub features: Tensor,
    pub ratios: Vec<f32>,
    pub targets: Vec<usize>,
    pub cells: Vec<usize>,
    pub conditions: ConditionFeatures,
    pub dropped: [bool; 2],
}

struct Outcome {
    grads: Option<Vec<Tensor>>,
    loss: f32,
    cells: usize,
    given: [bool; 2],
    dropped: [bool; 2],
}

/// Ground-truth tokens of the whole image: hard quantization against `e`.
pub fn target_tokens(pvqvae: &PVqVae, image: &Image) -> Result<Vec<usize>> {
    let f = pvqvae.encode(image)?;
    let ones = vec![1.0; pvqvae.config().cells()];
    Ok(pvqvae.codebook().nearest(&f, &ones)?.tokens)
}

#[derive(Clone, Debug)]
pub struct TransformerTrainer {
    pub config: TransformerTrainConfig,
    optimizer: Optimizer,
    step: u64,
}

impl TransformerTrainer {
    pub fn new(config: TransformerTrainConfig) -> Self {
        let optimizer = Optimizer::new(config.optimizer);
        Self {
            config,
            optimizer,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Masking, random input quantization and condition dropout for batch
    /// element `index` at the current step.
    pub fn prepare(
        &self,
        model: &UqTransformer,
        pvqvae: &PVqVae,
        encoders: Option<&ConditionEncoders>,
        sample: &TransformerSample,
        index: usize,
    ) -> Result<PreparedSample> {
        let mut rng = stream(self.config.seed, &[0x7472, self.step, index as u64]);
        let cfg = pvqvae.config();
        let mask = match &sample.mask {
            Some(m) => m.clone(),
            None => generate_mask(cfg.height, cfg.width, self.config.hole_ratio, &mut rng)?,
        };
        let masked = pvqvae.mask_image(&sample.image, &mask)?;
        let f = pvqvae.encode_masked(&masked)?;
        let ratios = masked.cell_ratios().to_vec();
        let q = pvqvae.codebook().nearest(&f, &ratios)?;
        let (features, _) = random_quantize_inputs(&f, &q.vectors, self.config.quantize_prob, &mut rng)?;
        let targets = target_tokens(pvqvae, &sample.image)?;

        let mut dropped = [false; 2];
        let mut conditions = ConditionFeatures::none();
        if model.config().with_conditions {
            let enc = encoders.ok_or_else(|| Error::Config("conditioned model needs condition encoders".into()))?;
            let mut kept = ConditionSet::none();
            if let Some(map) = &sample.conditions.semantic {
                dropped[0] = rng.random_bool(self.config.condition_drop_prob);
                if !dropped[0] {
                    let t = model.config();
                    kept.semantic = Some(if self.config.substitute_unknown {
                        substitute_unknown_categories(map, t.categories, t.unknown, &mut rng)?.0
                    } else {
                        map.clone()
                    });
                }
            }
            if let Some(map) = &sample.conditions.sketch {
                dropped[1] = rng.random_bool(self.config.condition_drop_prob);
                if !dropped[1] {
                    kept.sketch = Some(map.clone());
                }
            }
            conditions = enc.features(&kept)?;
        }
        Ok(PreparedSample {
            features,
            ratios,
            targets,
            cells: masked.masked_cells(),
            conditions,
            dropped,
        })
    }

    /// One AdamW update of `model`; `pvqvae` and the condition encoders stay frozen.
    pub fn train_step(
        &mut self,
        model: &mut UqTransformer,
        pvqvae: &PVqVae,
        encoders: Option<&ConditionEncoders>,
        batch: &[TransformerSample],
    ) -> Result<TransformerStepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        model.config().check_pvqvae(pvqvae.config())?;
        let update = self.step + 1;
        let lr = self.config.lr.at(update);
        let shared: &UqTransformer = model;
        let outcomes = try_map_indexed(self.config.parallelism, batch.len(), |i| {
            let prep = self.prepare(shared, pvqvae, encoders, &batch[i], i)?;
            let given = [
                batch[i].conditions.semantic.is_some(),
                batch[i].conditions.sketch.is_some(),
            ];
            let mut tape = Tape::new();
            let bound = tape.bind(shared.params(), true);
            let x = shared.build_input(&mut tape, &bound, &prep.features, &prep.ratios, &prep.conditions)?;
            let logits = shared.forward_logits(&mut tape, &bound, x)?;
            let loss = transformer_loss(&mut tape, logits, &prep.targets, &prep.cells)?;
            let grads = if loss.empty {
                None
            } else {
                Some(tape.backward(loss.total)?.for_bound(&tape, &bound))
            };
            Ok::<_, Error>(Outcome {
                grads,
                loss: loss.value,
                cells: prep.cells.len(),
                given,
                dropped: prep.dropped,
            })
        })?;

        let n = outcomes.len() as f32;
        let mut grads: Option<Vec<Tensor>> = None;
        for g in outcomes.iter().filter_map(|o| o.grads.as_ref()) {
            match &mut grads {
                None => grads = Some(g.clone()),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        if let Some(mut grads) = grads {
            grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / n));
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Tensor(put_tensor::TensorError::NumericFault {
                    op: "transformer gradient",
                }));
            }
            if lr > 0.0 {
                let mut targets: Vec<&mut Tensor> = model.params_mut().tensors_mut().collect();
                self.optimizer.step(&mut targets, &grads, lr as f32)?;
            }
        }
        self.step = update;
        let empty = outcomes.iter().filter(|o| o.cells == 0).count();
        if empty > 0 {
            tracing::warn!(step = update, empty, "batch elements without masked cells contribute zero loss");
        }
        let count = |f: &dyn Fn(&Outcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
        Ok(TransformerStepRecord {
            step: update,
            lr,
            loss: outcomes.iter().map(|o| o.loss).sum::<f32>() / n,
            masked_cells: outcomes.iter().map(|o| o.cells).sum(),
            empty,
            semantic_given: count(&|o| o.given[0]),
            semantic_dropped: count(&|o| o.dropped[0]),
            sketch_given: count(&|o| o.given[1]),
            sketch_dropped: count(&|o| o.dropped[1]),
        })
    }

    pub fn write_state(&self, ck: &mut Checkpoint) {
        ck.set("train.step", self.step);
        ck.set("train.optimizer_step", self.optimizer.step_count());
        let (m, v) = self.optimizer.moments();
        for (i, t) in m.iter().enumerate() {
            ck.push_f32(format!("opt/m.{i}"), t.clone());
        }
        for (i, t) in v.iter().enumerate() {
            ck.push_f32(format!("opt/v.{i}"), t.clone());
        }
    }

    pub fn restore_state(&mut self, ck: &Checkpoint) -> Result<()> {
        self.step = ck.parse("train.step")?;
        let opt_step: u64 = ck.parse("train.optimizer_step")?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        while ck.has(&format!("opt/m.{}", m.len())) {
            m.push(ck.f32(&format!("opt/m.{}", m.len()))?.clone());
        }
        while ck.has(&format!("opt/v.{}", v.len())) {
            v.push(ck.f32(&format!("opt/v.{}", v.len()))?.clone());
        }
        self.optimizer.restore(m, v, opt_step)?;
        Ok(())
    }
}
