use std::path::PathBuf;
use std::time::Instant;

use put_core::io::{Checkpoint, Image};
use put_core::pvqvae::{PVqVae, PvqvaeConfig, PvqvaeStepRecord, PvqvaeTrainConfig, PvqvaeTrainer, TrainMode};
use put_tensor::{GumbelSchedule, LrSchedule};

use super::codebook_stats::write_usage;
use super::{echo_config, load_items, parallelism, CsvLog};
use crate::error::{CliError, Result};
use crate::settings::{optional, required, settings};

settings!(TrainPvqvaeSettings, TrainPvqvaeFlags {
    /// Directory of training images (png/ppm, one size).
    corpus: PathBuf = PathBuf::new(),
    out_dir: PathBuf = PathBuf::from("runs/pvqvae"),
    /// Total number of updates, including those of a resumed checkpoint.
    steps: u64 = 2000,
    batch_size: usize = 4,
    seed: u64 = 0,
    patch_size: usize = 4,
    feature_dim: usize = 32,
    codebook_size: usize = 128,
    masked_codebook_size: usize = 32,
    decoder_channels: usize = 32,
    res_blocks: usize = 2,
    commitment_beta: f64 = 0.25,
    start_lr: f64 = 0.0,
    peak_lr: f64 = 2e-4,
    final_lr: f64 = 0.0,
    warmup_steps: u64 = 5000,
    /// Gumbel-softmax relaxation of the quantizer; hard assignment when false.
    gumbel: bool = true,
    tau_start: f64 = 20.0,
    tau_end: f64 = 1e-6,
    anneal_steps: u64 = 5000,
    noise_scale_early: f64 = 1.0,
    noise_scale_late: f64 = 0.1,
    /// guided (masked input, reference branch) or plain (whole input).
    mode: String = "guided".into(),
    hole_lo: f64 = 0.1,
    hole_hi: f64 = 0.6,
    ref_hole_lo: f64 = 0.1,
    ref_hole_hi: f64 = 0.6,
    unmasked_prob: f64 = 0.0,
    reference_drop_prob: f64 = 0.0,
    sequential: bool = false,
    /// Checkpoint written by an earlier run; training continues from its step.
    resume: PathBuf = PathBuf::new(),
    /// Print a progress line every this many steps; 0 disables.
    print_every: u64 = 100,
});

pub fn model_config(s: &TrainPvqvaeSettings, height: usize, width: usize) -> PvqvaeConfig {
    PvqvaeConfig {
        patch_size: s.patch_size,
        feature_dim: s.feature_dim,
        codebook_size: s.codebook_size,
        masked_codebook_size: s.masked_codebook_size,
        height,
        width,
        in_channels: 3,
        commitment_beta: s.commitment_beta as f32,
        decoder_channels: s.decoder_channels,
        res_blocks: s.res_blocks,
        reference_branch: true,
    }
}

pub fn train_config(s: &TrainPvqvaeSettings) -> Result<PvqvaeTrainConfig> {
    let mode = match s.mode.as_str() {
        "guided" => TrainMode::Guided,
        "plain" => TrainMode::Plain,
        other => {
            return Err(CliError::Setting {
                key: "mode".into(),
                message: format!("expected guided or plain, got {other:?}"),
            })
        }
    };
    let mut c = PvqvaeTrainConfig::new(s.steps, s.seed);
    c.batch_size = s.batch_size;
    c.lr = LrSchedule {
        start_lr: s.start_lr,
        peak_lr: s.peak_lr,
        final_lr: s.final_lr,
        warmup_steps: s.warmup_steps,
        total_steps: s.steps,
    };
    c.gumbel = s.gumbel.then_some(GumbelSchedule {
        tau_start: s.tau_start,
        tau_end: s.tau_end,
        anneal_steps: s.anneal_steps,
        noise_scale_early: s.noise_scale_early,
        noise_scale_late: s.noise_scale_late,
    });
    c.hole_ratio = (s.hole_lo, s.hole_hi);
    c.ref_hole_ratio = (s.ref_hole_lo, s.ref_hole_hi);
    c.unmasked_prob = s.unmasked_prob;
    c.reference_drop_prob = s.reference_drop_prob;
    c.mode = mode;
    c.parallelism = parallelism(s.sequential);
    Ok(c)
}

/// Batch `step` (0-based) cycles through the corpus in order.
pub fn batch_for(images: &[Image], step: u64, batch_size: usize) -> Vec<Image> {
    let n = images.len();
    (0..batch_size)
        .map(|j| images[(step as usize * batch_size + j) % n].clone())
        .collect()
}

pub fn run(s: &TrainPvqvaeSettings) -> Result<()> {
    echo_config("train-pvqvae", &s.render(), &s.out_dir)?;
    if s.batch_size == 0 {
        return Err(CliError::Setting {
            key: "batch_size".into(),
            message: "must be at least 1".into(),
        });
    }
    let items = load_items(required(&s.corpus, "corpus")?)?;
    let images: Vec<Image> = items.into_iter().map(|i| i.image).collect();
    let config = model_config(s, images[0].height(), images[0].width());
    let mut trainer = PvqvaeTrainer::new(train_config(s)?);

    let (mut model, resumed) = match optional(&s.resume) {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let model = PVqVae::read_checkpoint(&ck, "pvqvae")?;
            model.config().expect_matches(&config)?;
            trainer.restore_state(&ck)?;
            println!("resuming from step {}", trainer.step());
            (model, true)
        }
        None => (PVqVae::new(config, s.seed)?, false),
    };

    let log_path = s.out_dir.join("pvqvae_log.csv");
    let mut log = CsvLog::open(&log_path, PvqvaeStepRecord::CSV_HEADER, resumed)?;
    let start = Instant::now();
    let mut last = None;
    while trainer.step() < s.steps {
        let batch = batch_for(&images, trainer.step(), s.batch_size);
        let rec = trainer.train_step(&mut model, &batch)?;
        log.row(&rec.csv_row())?;
        if s.print_every > 0 && rec.step % s.print_every == 0 {
            println!(
                "step {} loss {:.5} recon {:.5} used {}/{} ({:.1}s)",
                rec.step,
                rec.loss,
                rec.recon,
                rec.used_e,
                rec.used_e_prime,
                start.elapsed().as_secs_f64()
            );
        }
        last = Some(rec);
    }
    log.finish()?;

    let mut ck = Checkpoint::new();
    ck.set("kind", "pvqvae");
    model.write_checkpoint(&mut ck, "pvqvae");
    trainer.write_state(&mut ck);
    let ck_path = s.out_dir.join("pvqvae.ckpt");
    ck.save(&ck_path)?;
    let (used_e, used_ep) = write_usage(&model, &s.out_dir.join("codebook_usage.csv"))?;
    if let Some(rec) = last {
        println!("final step {} loss {:.5}", rec.step, rec.loss);
    }
    println!(
        "codebook rows used: e {used_e}, e' {used_ep}; checkpoint {}",
        ck_path.display()
    );
    Ok(())
}
