use std::path::{Path, PathBuf};

use put_core::io::{load_gray, load_image, load_mask, save_image, ConditionSet, SemanticMap, SketchMap};
use put_core::sampler::{inpaint, SamplerConfig, K1};

use super::{echo_config, load_models, parallelism, write_file, CsvLog};
use crate::error::{CliError, Result};
use crate::settings::{optional, required, settings};

settings!(InpaintSettings, InpaintFlags {
    pvqvae: PathBuf = PathBuf::new(),
    transformer: PathBuf = PathBuf::new(),
    image: PathBuf = PathBuf::new(),
    /// Binary PNG: 255 (or 1) keeps a pixel, 0 marks it missing.
    mask: PathBuf = PathBuf::new(),
    semantic: PathBuf = PathBuf::new(),
    sketch: PathBuf = PathBuf::new(),
    /// Cells per iteration, or all.
    k1: K1 = K1::Top(20),
    k2: usize = 50,
    n_samples: usize = 1,
    seed: u64 = 0,
    out_dir: PathBuf = PathBuf::from("runs/inpaint"),
    sequential: bool = false,
});

fn extension(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_else(|| "png".into())
}

pub fn run(s: &InpaintSettings) -> Result<()> {
    echo_config("inpaint", &s.render(), &s.out_dir)?;
    let models = load_models(required(&s.pvqvae, "pvqvae")?, required(&s.transformer, "transformer")?)?;
    let image_path = required(&s.image, "image")?;
    let image = load_image(image_path)?;
    let mask = load_mask(required(&s.mask, "mask")?)?;
    mask.check_size(image.height(), image.width())?;
    let conditions = ConditionSet {
        semantic: optional(&s.semantic)
            .map(|p| load_gray(p).map(|g| SemanticMap::from_gray(&g)))
            .transpose()?,
        sketch: optional(&s.sketch)
            .map(|p| load_gray(p).and_then(|g| SketchMap::from_gray(&g)))
            .transpose()?,
    };
    let config = SamplerConfig {
        k1: s.k1,
        k2: s.k2,
        n_samples: s.n_samples,
        seed: s.seed,
    };
    let results = inpaint(&models, &image, &mask, &conditions, &config, parallelism(s.sequential))?;

    let gw = models.pvqvae.config().grid().1;
    let mut trace = CsvLog::create(&s.out_dir.join("trace.csv"), "sample,iteration,cells")?;
    for (i, r) in results.iter().enumerate() {
        if mask.is_full() {
            let out = s.out_dir.join(format!("sample_{i}.{}", extension(image_path)));
            std::fs::copy(image_path, &out).map_err(|e| CliError::io(&out, e))?;
        } else {
            save_image(&r.image, s.out_dir.join(format!("sample_{i}.png")))?;
        }
        write_file(&s.out_dir.join(format!("tokens_{i}.txt")), r.tokens.dump())?;
        for (it, cells) in r.trace.iter().enumerate() {
            let cells: Vec<String> = cells.iter().map(|c| format!("{}:{}", c / gw, c % gw)).collect();
            trace.row(&format!("{i},{},{}", it + 1, cells.join(" ")))?;
        }
    }
    trace.finish()?;
    let iterations = results.first().map_or(0, |r| r.trace.len());
    println!(
        "wrote {} samples after {iterations} iterations to {}",
        results.len(),
        s.out_dir.display()
    );
    Ok(())
}
