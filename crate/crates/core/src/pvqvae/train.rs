use put_tensor::exec::try_map_indexed;
use put_tensor::{GumbelSchedule, LrSchedule, Optimizer, OptimizerConfig, Parallelism, Tape, Tensor, Var};
use rand::Rng;

use super::codebook::QuantizeMode;
use super::loss::{straight_through, vqvae_loss};
use super::masked::MaskedImage;
use super::model::PVqVae;
use crate::error::{Error, Result};
use crate::io::mask::generate_mask;
use crate::io::{Checkpoint, Image, Mask};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Input masked by `m`, reference by `m ⊗ m′`, guided decode.
    Guided,
    /// Whole input, no reference; used for condition-map models.
    Plain,
}

#[derive(Clone, Debug)]
pub struct PvqvaeTrainConfig {
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerConfig,
    /// `None` trains with hard quantization throughout.
    pub gumbel: Option<GumbelSchedule>,
    /// Hole fraction of the input mask `m`.
    pub hole_ratio: (f64, f64),
    /// Hole fraction of the reference mask `m′`.
    pub ref_hole_ratio: (f64, f64),
    /// Probability that `m` keeps every pixel.
    pub unmasked_prob: f64,
    /// Probability that `m′` erases every pixel, so the decoder sees no reference.
    pub reference_drop_prob: f64,
    pub mode: TrainMode,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl PvqvaeTrainConfig {
    pub fn new(total_steps: u64, seed: u64) -> Self {
        Self {
            batch_size: 4,
            lr: LrSchedule::pvqvae(total_steps),
            optimizer: OptimizerConfig::pvqvae(),
            gumbel: Some(GumbelSchedule::default()),
            hole_ratio: (0.1, 0.6),
            ref_hole_ratio: (0.1, 0.6),
            unmasked_prob: 0.0,
            reference_drop_prob: 0.0,
            mode: TrainMode::Guided,
            seed,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PvqvaeStepRecord {
    /// Update index, starting at 1.
    pub step: u64,
    pub lr: f64,
    pub tau: Option<f64>,
    pub noise_scale: Option<f64>,
    pub loss: f32,
    pub recon: f32,
    pub codebook: f32,
    pub commit: f32,
    pub used_e: usize,
    pub used_e_prime: usize,
}

impl PvqvaeStepRecord {
    pub const CSV_HEADER: &'static str = "step,lr,tau,noise_scale,loss,recon,codebook,commit,used_e,used_e_prime";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{:e},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            opt(self.tau),
            opt(self.noise_scale),
            self.loss,
            self.recon,
            self.codebook,
            self.commit,
            self.used_e,
            self.used_e_prime
        )
    }
}

struct Outcome {
    grads: Vec<Tensor>,
    tokens: Vec<usize>,
    terms: [f32; 4],
}

/// Drives optimisation of a [`PVqVae`]; owns the optimizer state and step counter.
#[derive(Clone, Debug)]
pub struct PvqvaeTrainer {
    pub config: PvqvaeTrainConfig,
    optimizer: Optimizer,
    step: u64,
}

impl PvqvaeTrainer {
    pub fn new(config: PvqvaeTrainConfig) -> Self {
        let optimizer = Optimizer::new(config.optimizer);
        Self {
            config,
            optimizer,
            step: 0,
        }
    }

    /// Updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Masks `(m, m′)` for batch element `index` at the current step.
    pub fn sample_masks(&self, height: usize, width: usize, index: usize) -> Result<(Mask, Mask)> {
        let mut rng = stream(self.config.seed, &[0x6d61, self.step, index as u64]);
        self.masks_from(height, width, &mut rng)
    }

    fn masks_from(&self, h: usize, w: usize, rng: &mut impl Rng) -> Result<(Mask, Mask)> {
        if self.config.mode == TrainMode::Plain {
            return Ok((Mask::full(h, w), Mask::full(h, w)));
        }
        let m = if rng.random_bool(self.config.unmasked_prob.clamp(0.0, 1.0)) {
            Mask::full(h, w)
        } else {
            generate_mask(h, w, self.config.hole_ratio, rng)?
        };
        let m2 = if rng.random_bool(self.config.reference_drop_prob.clamp(0.0, 1.0)) {
            Mask::empty(h, w)
        } else {
            generate_mask(h, w, self.config.ref_hole_ratio, rng)?
        };
        Ok((m, m2))
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, model: &mut PVqVae, batch: &[Image]) -> Result<PvqvaeStepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let schedule = self.config.gumbel.map(|g| g.at(self.step));
        let update = self.step + 1;
        let lr = self.config.lr.at(update);
        let shared: &PVqVae = model;
        let outcomes = try_map_indexed(self.config.parallelism, batch.len(), |i| {
            let mut rng = stream(self.config.seed, &[0x6d61, self.step, i as u64]);
            let (m, m2) = self.masks_from(batch[i].height(), batch[i].width(), &mut rng)?;
            forward_backward(
                shared,
                &batch[i],
                (&m, &m2),
                self.config.mode,
                schedule,
                &mut rng,
            )
        })?;

        let n = outcomes.len() as f32;
        let mut grads = outcomes[0].grads.clone();
        let mut terms = outcomes[0].terms;
        for o in &outcomes[1..] {
            for (g, og) in grads.iter_mut().zip(&o.grads) {
                g.add_assign(og)?;
            }
            for (t, ot) in terms.iter_mut().zip(o.terms) {
                *t += ot;
            }
        }
        grads.iter_mut().for_each(|g| g.scale_in_place(1.0 / n));
        terms.iter_mut().for_each(|t| *t /= n);

        if lr > 0.0 {
            let (params, codebook) = model.parts_mut();
            let mut targets: Vec<&mut Tensor> = params.tensors_mut().collect();
            targets.extend(codebook.tables_mut());
            self.optimizer.step(&mut targets, &grads, lr as f32)?;
        }
        for o in &outcomes {
            model.codebook_mut().record_usage(&o.tokens);
        }
        self.step = update;
        let (used_e, used_e_prime) = model.codebook().distinct_used();
        Ok(PvqvaeStepRecord {
            step: update,
            lr,
            tau: schedule.map(|s| s.0),
            noise_scale: schedule.map(|s| s.1),
            loss: terms[0],
            recon: terms[1],
            codebook: terms[2],
            commit: terms[3],
            used_e,
            used_e_prime,
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

/// Pairwise Euclidean distances `[P, V]` between feature rows and table rows.
fn distances(tape: &mut Tape, f: Var, table: Var) -> Result<Var> {
    let d = tape.shape(f)[1];
    let t_t = tape.permute(table, &[1, 0])?;
    let cross = tape.matmul(f, t_t)?;
    let cross = tape.scale(cross, -2.0)?;
    let ones_col = tape.constant(Tensor::ones([d, 1]));
    let ones_row = tape.constant(Tensor::ones([1, d]));
    let fsq = tape.square(f)?;
    let fsq = tape.matmul(fsq, ones_col)?;
    let tsq = tape.square(t_t)?;
    let tsq = tape.matmul(ones_row, tsq)?;
    let d2 = tape.add(cross, fsq)?;
    let d2 = tape.add(d2, tsq)?;
    let d2 = tape.relu(d2)?;
    let d2 = tape.add_scalar(d2, 1e-8)?;
    Ok(tape.sqrt(d2)?)
}

/// `y·E − sg[y·E]` with `y = softmax((s·g − d)/τ)` restricted to each cell's
/// codebook: zero in value, relaxed gradient to features and table rows.
fn gumbel_relaxation(
    tape: &mut Tape,
    f: Var,
    table: Var,
    noise: &Tensor,
    ratios: &[f32],
    k: usize,
    tau: f64,
    scale: f64,
) -> Result<Var> {
    let v = tape.shape(table)[0];
    let d = distances(tape, f, table)?;
    let inv = (1.0 / tau) as f32;
    let scaled = tape.scale(d, -inv)?;
    let offset = Tensor::from_fn([ratios.len(), v], |idx| {
        let (row, col) = (idx / v, idx % v);
        let own = (ratios[row] == 1.0) == (col < k);
        if own {
            (scale as f32) * noise.data()[idx] * inv
        } else {
            -1e30
        }
    });
    let offset = tape.constant(offset);
    let logits = tape.add(scaled, offset)?;
    let y = tape.softmax(logits)?;
    let soft = tape.matmul(y, table)?;
    let soft_sg = tape.detach(soft);
    Ok(tape.sub(soft, soft_sg)?)
}

fn forward_backward(
    model: &PVqVae,
    image: &Image,
    (m, m2): (&Mask, &Mask),
    mode: TrainMode,
    gumbel: Option<(f64, f64)>,
    rng: &mut impl Rng,
) -> Result<Outcome> {
    let cfg = model.config();
    let mut tape = Tape::new();
    let bound = tape.bind(model.params(), true);
    let e = tape.param(model.codebook().e().clone());
    let ep = tape.param(model.codebook().e_prime().clone());

    let input = model.mask_image(image, m)?;
    let f = model.encode_var(&mut tape, &bound, input.pixels())?;
    let q = match gumbel {
        Some((tau, noise_scale)) => model.codebook().assign(
            tape.value(f),
            input.cell_ratios(),
            QuantizeMode::Gumbel {
                tau,
                noise_scale,
                rng,
            },
        )?,
        None => model.codebook().nearest(tape.value(f), input.cell_ratios())?,
    };
    let table = tape.concat(&[e, ep], 0)?;
    let quantized = tape.embed_lookup(table, &q.tokens)?;
    let mut z = straight_through(&mut tape, f, quantized)?;
    if let (Some((tau, scale)), Some(noise)) = (gumbel, &q.noise) {
        let relax = gumbel_relaxation(&mut tape, f, table, noise, input.cell_ratios(), cfg.codebook_size, tau, scale)?;
        z = tape.add(z, relax)?;
    }
    let zmap = model.to_map(&mut tape, z)?;
    let recon = match mode {
        TrainMode::Guided => {
            let reference = MaskedImage::new(image, &m.intersect(m2)?, cfg.patch_size)?;
            let ref_img = tape.constant(reference.pixels().to_nchw());
            let raw = model
                .decoder()
                .forward(&mut tape, &bound, zmap, Some((ref_img, reference.levels())))?;
            let keep: Vec<bool> = (0..cfg.in_channels)
                .flat_map(|_| reference.mask().keep().iter().copied())
                .collect();
            tape.select(&keep, ref_img, raw)?
        }
        TrainMode::Plain => model.decoder().forward(&mut tape, &bound, zmap, None)?,
    };
    let target = tape.constant(image.to_nchw());
    let loss = vqvae_loss(&mut tape, target, recon, f, quantized, cfg.commitment_beta)?;
    let grads = tape.backward(loss.total)?;
    let mut all = grads.for_bound(&tape, &bound);
    all.push(grads.wrt(&tape, e));
    all.push(grads.wrt(&tape, ep));
    let total = tape.value(loss.total).data()[0];
    Ok(Outcome {
        grads: all,
        tokens: q.tokens,
        terms: [total, loss.recon, loss.codebook, loss.commit],
    })
}
