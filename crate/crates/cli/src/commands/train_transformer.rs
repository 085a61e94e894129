use std::path::PathBuf;
use std::time::Instant;

use put_core::io::{ConditionSet, Image};
use put_core::pvqvae::{PVqVae, PvqvaeTrainConfig, PvqvaeTrainer, TrainMode};
use put_core::transformer::{
    load_transformer, save_transformer, semantic_image, sketch_image, ConditionEncoders, TransformerConfig,
    TransformerSample, TransformerStepRecord, TransformerTrainConfig, TransformerTrainer, UqTransformer,
};
use put_tensor::LrSchedule;

use super::train_pvqvae::batch_for;
use super::{echo_config, load_items, parallelism, CsvLog};
use crate::error::{CliError, Result};
use crate::settings::{optional, required, settings};

settings!(TrainTransformerSettings, TrainTransformerFlags {
    corpus: PathBuf = PathBuf::new(),
    /// Frozen image P-VQVAE checkpoint.
    pvqvae: PathBuf = PathBuf::new(),
    out_dir: PathBuf = PathBuf::from("runs/transformer"),
    steps: u64 = 2000,
    batch_size: usize = 4,
    seed: u64 = 0,
    depth: usize = 2,
    hidden_dim: usize = 64,
    heads: usize = 4,
    mlp_ratio: f64 = 4.0,
    /// Width of the image part of the input; 0 takes hidden_dim minus the
    /// two condition widths when conditioned.
    input_dim: usize = 0,
    /// Semantic and sketch guidance, read from corpus/semantic and corpus/sketch.
    conditions: bool = false,
    condition_dim: usize = 16,
    categories: usize = 8,
    unknown: usize = 4,
    /// Updates for each condition-map P-VQVAE before the transformer trains.
    condition_steps: u64 = 500,
    condition_lr: f64 = 1e-3,
    start_lr: f64 = 1e-5,
    peak_lr: f64 = 1.5e-3,
    final_lr: f64 = 0.0,
    warmup_steps: u64 = 20000,
    quantize_prob: f64 = 0.3,
    condition_drop_prob: f64 = 0.3,
    substitute_unknown: bool = true,
    hole_lo: f64 = 0.1,
    hole_hi: f64 = 0.6,
    sequential: bool = false,
    resume: PathBuf = PathBuf::new(),
    print_every: u64 = 100,
});

pub fn model_config(s: &TrainTransformerSettings, pvqvae: &PVqVae) -> TransformerConfig {
    let input_dim = match (s.input_dim, s.conditions) {
        (0, true) => s.hidden_dim.saturating_sub(2 * s.condition_dim),
        (0, false) => s.hidden_dim,
        (d, _) => d,
    };
    TransformerConfig {
        depth: s.depth,
        hidden_dim: s.hidden_dim,
        heads: s.heads,
        mlp_ratio: s.mlp_ratio,
        input_dim,
        with_conditions: s.conditions,
        condition_dim: s.condition_dim,
        categories: s.categories,
        unknown: s.unknown,
        ..TransformerConfig::toy()
    }
    .for_pvqvae(pvqvae.config())
}

fn train_condition_model(model: &mut PVqVae, images: &[Image], s: &TrainTransformerSettings, tag: u64) -> Result<f32> {
    let mut c = PvqvaeTrainConfig::new(s.condition_steps, s.seed ^ tag);
    c.mode = TrainMode::Plain;
    c.gumbel = None;
    c.batch_size = s.batch_size;
    c.parallelism = parallelism(s.sequential);
    c.lr = LrSchedule {
        start_lr: 0.0,
        peak_lr: s.condition_lr,
        final_lr: 0.0,
        warmup_steps: (s.condition_steps / 10).max(1),
        total_steps: s.condition_steps,
    };
    let mut trainer = PvqvaeTrainer::new(c);
    let mut loss = f32::NAN;
    while trainer.step() < s.condition_steps {
        loss = trainer.train_step(model, &batch_for(images, trainer.step(), s.batch_size))?.loss;
    }
    Ok(loss)
}

fn condition_encoders(
    s: &TrainTransformerSettings,
    pvqvae: &PVqVae,
    config: &TransformerConfig,
    conditions: &[ConditionSet],
) -> Result<ConditionEncoders> {
    let mut enc = ConditionEncoders::new(pvqvae.config(), config, s.seed)?;
    let classes = enc.classes();
    let semantic: Vec<Image> = conditions
        .iter()
        .filter_map(|c| c.semantic.as_ref())
        .map(|m| semantic_image(m, classes))
        .collect::<Result<_, _>>()?;
    let sketch: Vec<Image> = conditions.iter().filter_map(|c| c.sketch.as_ref()).map(sketch_image).collect();
    if semantic.is_empty() || sketch.is_empty() {
        return Err(CliError::Input(
            "conditions = true needs semantic/ and sketch/ maps in the corpus".into(),
        ));
    }
    if s.condition_steps > 0 {
        let a = train_condition_model(&mut enc.semantic, &semantic, s, 0x5e)?;
        let b = train_condition_model(&mut enc.sketch, &sketch, s, 0x57)?;
        println!("condition models trained: semantic loss {a:.5}, sketch loss {b:.5}");
    }
    Ok(enc)
}

pub fn run(s: &TrainTransformerSettings) -> Result<()> {
    echo_config("train-transformer", &s.render(), &s.out_dir)?;
    if s.batch_size == 0 {
        return Err(CliError::Setting {
            key: "batch_size".into(),
            message: "must be at least 1".into(),
        });
    }
    let pvqvae = PVqVae::load(required(&s.pvqvae, "pvqvae")?)?;
    let items = load_items(required(&s.corpus, "corpus")?)?;
    let config = model_config(s, &pvqvae);
    config.validate()?;
    let mut trainer = TransformerTrainer::new(TransformerTrainConfig {
        batch_size: s.batch_size,
        lr: LrSchedule {
            start_lr: s.start_lr,
            peak_lr: s.peak_lr,
            final_lr: s.final_lr,
            warmup_steps: s.warmup_steps,
            total_steps: s.steps,
        },
        quantize_prob: s.quantize_prob,
        condition_drop_prob: s.condition_drop_prob,
        substitute_unknown: s.substitute_unknown,
        hole_ratio: (s.hole_lo, s.hole_hi),
        parallelism: parallelism(s.sequential),
        ..TransformerTrainConfig::new(s.steps, s.seed)
    });

    let (mut model, encoders, resumed) = match optional(&s.resume) {
        Some(path) => {
            let (model, encoders, ck) = load_transformer(path)?;
            if model.config() != &config {
                return Err(put_core::Error::ConfigMismatch {
                    key: "transformer".into(),
                    expected: format!("{config:?}"),
                    found: format!("{:?}", model.config()),
                }
                .into());
            }
            trainer.restore_state(&ck)?;
            println!("resuming from step {}", trainer.step());
            (model, encoders, true)
        }
        None => {
            let conditions: Vec<ConditionSet> = items.iter().map(|i| i.conditions.clone()).collect();
            let encoders = if s.conditions {
                Some(condition_encoders(s, &pvqvae, &config, &conditions)?)
            } else {
                None
            };
            (UqTransformer::new(config.clone(), s.seed)?, encoders, false)
        }
    };
    config.check_pvqvae(pvqvae.config())?;

    let samples: Vec<TransformerSample> = items
        .into_iter()
        .map(|i| {
            let sample = TransformerSample::new(i.image);
            if s.conditions {
                sample.with_conditions(i.conditions)
            } else {
                sample
            }
        })
        .collect();
    let fingerprint = pvqvae.fingerprint();
    let log_path = s.out_dir.join("transformer_log.csv");
    let mut log = CsvLog::open(&log_path, TransformerStepRecord::CSV_HEADER, resumed)?;
    let start = Instant::now();
    let n = samples.len();
    while trainer.step() < s.steps {
        let base = trainer.step() as usize * s.batch_size;
        let batch: Vec<TransformerSample> = (0..s.batch_size).map(|j| samples[(base + j) % n].clone()).collect();
        let rec = trainer.train_step(&mut model, &pvqvae, encoders.as_ref(), &batch)?;
        log.row(&rec.csv_row())?;
        if s.print_every > 0 && (rec.step % s.print_every == 0 || rec.step == 1) {
            println!(
                "step {} loss {:.5} lr {:.3e} ({:.1}s)",
                rec.step,
                rec.loss,
                rec.lr,
                start.elapsed().as_secs_f64()
            );
        }
    }
    log.finish()?;
    debug_assert_eq!(fingerprint, pvqvae.fingerprint());
    let path = s.out_dir.join("transformer.ckpt");
    save_transformer(&path, &model, encoders.as_ref(), Some(&trainer))?;
    println!("pvqvae fingerprint {fingerprint:016x}; checkpoint {}", path.display());
    Ok(())
}
