use std::path::PathBuf;

use put_core::io::{generate_mask, metrics, token_metrics, ConditionSet};
use put_core::rng::{derive_seed, stream};
use put_core::sampler::{inpaint, SamplerConfig, SamplingSession, K1};
use put_core::transformer::target_tokens;

use super::{echo_config, file_name, load_items, load_models, parallelism, CsvLog};
use crate::error::Result;
use crate::settings::{required, settings};

settings!(EvalSettings, EvalFlags {
    pvqvae: PathBuf = PathBuf::new(),
    transformer: PathBuf = PathBuf::new(),
    corpus: PathBuf = PathBuf::new(),
    out_dir: PathBuf = PathBuf::from("runs/eval"),
    /// Masks drawn per image and bucket.
    masks_per_image: usize = 1,
    k1: K1 = K1::Top(20),
    k2: usize = 50,
    seed: u64 = 0,
    sequential: bool = false,
});

/// Hole-ratio buckets of the report: name, lower and upper bound.
pub const BUCKETS: [(&str, f64, f64); 3] = [("20-40", 0.2, 0.4), ("40-60", 0.4, 0.6), ("10-60", 0.1, 0.6)];

const SAMPLE_HEADER: &str = "bucket,image,mask,hole_ratio,masked_cells,psnr,ssim,l1,acc_at_max_prob,prob_at_gt";
const SUMMARY_HEADER: &str = "bucket,samples,psnr,ssim,l1,acc_at_max_prob,prob_at_gt";

pub fn run(s: &EvalSettings) -> Result<()> {
    echo_config("eval", &s.render(), &s.out_dir)?;
    let models = load_models(required(&s.pvqvae, "pvqvae")?, required(&s.transformer, "transformer")?)?;
    let items = load_items(required(&s.corpus, "corpus")?)?;
    let cfg = models.pvqvae.config().clone();
    let mut per_sample = CsvLog::create(&s.out_dir.join("eval_samples.csv"), SAMPLE_HEADER)?;
    let mut summary = CsvLog::create(&s.out_dir.join("eval.csv"), SUMMARY_HEADER)?;
    println!("{SUMMARY_HEADER}");
    for (b, &(name, lo, hi)) in BUCKETS.iter().enumerate() {
        let mut sums = [0.0f64; 5];
        let mut count = 0usize;
        for (i, item) in items.iter().enumerate() {
            let conditions = if models.with_conditions() {
                item.conditions.clone()
            } else {
                ConditionSet::none()
            };
            let targets = target_tokens(&models.pvqvae, &item.image)?;
            for j in 0..s.masks_per_image {
                let path = [b as u64, i as u64, j as u64];
                let mask = generate_mask(cfg.height, cfg.width, (lo, hi), &mut stream(s.seed, &path))?;
                let config = SamplerConfig {
                    k1: s.k1,
                    k2: s.k2,
                    n_samples: 1,
                    seed: derive_seed(s.seed ^ 0x5a, &path),
                };
                let out = inpaint(&models, &item.image, &mask, &conditions, &config, parallelism(s.sequential))?;
                let m = metrics(&out[0].image, &item.image, None)?;
                let session = SamplingSession::for_sample(&models, &item.image, &mask, &conditions, config.seed, 0)?;
                let t = token_metrics(&session.probabilities(&models)?, &targets, session.masked())?;
                let row = [m.psnr, m.ssim, m.l1, t.acc_at_max_prob, t.prob_at_gt];
                per_sample.row(&format!(
                    "{name},{},{j},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    file_name(&item.path),
                    mask.hole_ratio(),
                    t.cells,
                    row[0],
                    row[1],
                    row[2],
                    row[3],
                    row[4]
                ))?;
                sums.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                count += 1;
            }
        }
        let mean = |k: usize| if count == 0 { 0.0 } else { sums[k] / count as f64 };
        let line = format!(
            "{name},{count},{:.4},{:.4},{:.4},{:.4},{:.4}",
            mean(0),
            mean(1),
            mean(2),
            mean(3),
            mean(4)
        );
        println!("{line}");
        summary.row(&line)?;
    }
    per_sample.finish()?;
    summary.finish()
}
