pub mod codebook_stats;
pub mod eval;
pub mod inpaint;
pub mod make_toy_corpus;
pub mod reconstruct;
pub mod train_pvqvae;
pub mod train_transformer;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use put_core::io::{load_corpus, load_gray, ConditionSet, Image, SemanticMap, SketchMap};
use put_core::pvqvae::PVqVae;
use put_core::sampler::PutModels;
use put_core::transformer::load_transformer;
use put_tensor::Parallelism;

use crate::error::{CliError, Result};

pub fn parallelism(sequential: bool) -> Parallelism {
    if sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Prints the effective configuration and stores it as `config.txt` in `out_dir`.
pub fn echo_config(command: &str, rendered: &str, out_dir: &Path) -> Result<()> {
    println!("# put {command}: effective configuration");
    print!("{rendered}");
    create_dir(out_dir)?;
    let path = out_dir.join("config.txt");
    std::fs::write(&path, rendered).map_err(|e| CliError::io(&path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Headered CSV file, truncated or appended to.
pub struct CsvLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        Self::open(path, header, false)
    }

    /// Appends when the file exists, so resumed runs extend their log.
    pub fn open(path: &Path, header: &str, append: bool) -> Result<Self> {
        let exists = append && path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(exists)
            .truncate(!exists)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        let mut log = Self {
            path: path.into(),
            out: BufWriter::new(file),
        };
        if !exists {
            log.row(header)?;
        }
        Ok(log)
    }

    pub fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// A corpus image with the condition maps found next to it.
pub struct CorpusItem {
    pub path: PathBuf,
    pub image: Image,
    pub conditions: ConditionSet,
}

/// Loads `dir/*.png|ppm` plus `dir/semantic/<name>.png` and `dir/sketch/<name>.png` when present.
pub fn load_items(dir: &Path) -> Result<Vec<CorpusItem>> {
    let mut items = Vec::new();
    for (path, image) in load_corpus(dir)? {
        let stem = path.file_stem().map(|s| format!("{}.png", s.to_string_lossy())).unwrap_or_default();
        let semantic = dir.join("semantic").join(&stem);
        let sketch = dir.join("sketch").join(&stem);
        let conditions = ConditionSet {
            semantic: semantic
                .is_file()
                .then(|| load_gray(&semantic).map(|g| SemanticMap::from_gray(&g)))
                .transpose()?,
            sketch: sketch
                .is_file()
                .then(|| load_gray(&sketch).and_then(|g| SketchMap::from_gray(&g)))
                .transpose()?,
        };
        items.push(CorpusItem { path, image, conditions });
    }
    Ok(items)
}

pub fn load_models(pvqvae: &Path, transformer: &Path) -> Result<PutModels> {
    let image = PVqVae::load(pvqvae)?;
    let (transformer, encoders, _) = load_transformer(transformer)?;
    Ok(PutModels::new(image, transformer, encoders)?)
}

pub fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
