use std::path::{Path, PathBuf};

use put_core::pvqvae::PVqVae;
use put_core::transformer::target_tokens;

use super::{echo_config, load_items, CsvLog};
use crate::error::Result;
use crate::settings::{optional, required, settings};

settings!(CodebookStatsSettings, CodebookStatsFlags {
    pvqvae: PathBuf = PathBuf::new(),
    /// Count assignments of these images instead of the stored training usage.
    corpus: PathBuf = PathBuf::new(),
    out_dir: PathBuf = PathBuf::from("runs/codebook"),
});

/// `exp` of the entropy of a usage histogram; 0 for an empty one.
pub fn perplexity(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

fn write_histograms(path: &Path, e: &[u64], e_prime: &[u64]) -> Result<()> {
    let mut log = CsvLog::create(path, "codebook,row,count")?;
    for (name, counts) in [("e", e), ("e_prime", e_prime)] {
        for (row, c) in counts.iter().enumerate() {
            log.row(&format!("{name},{row},{c}"))?;
        }
    }
    log.finish()
}

/// Writes the stored training usage; returns the distinct rows used in `e` and `e′`.
pub fn write_usage(model: &PVqVae, path: &Path) -> Result<(usize, usize)> {
    let (e, ep) = model.codebook().usage();
    write_histograms(path, e, ep)?;
    Ok(model.codebook().distinct_used())
}

pub fn run(s: &CodebookStatsSettings) -> Result<()> {
    echo_config("codebook-stats", &s.render(), &s.out_dir)?;
    let model = PVqVae::load(required(&s.pvqvae, "pvqvae")?)?;
    let path = s.out_dir.join("codebook_usage.csv");
    let (e, ep) = match optional(&s.corpus) {
        Some(dir) => {
            let mut e = vec![0u64; model.codebook().k()];
            for item in load_items(dir)? {
                for t in target_tokens(&model, &item.image)? {
                    e[t] += 1;
                }
            }
            let ep = vec![0u64; model.codebook().k_prime()];
            write_histograms(&path, &e, &ep)?;
            (e, ep)
        }
        None => {
            write_usage(&model, &path)?;
            let (e, ep) = model.codebook().usage();
            (e.to_vec(), ep.to_vec())
        }
    };
    let used = |c: &[u64]| c.iter().filter(|&&x| x > 0).count();
    println!(
        "e: {} of {} rows used, perplexity {:.2}",
        used(&e),
        e.len(),
        perplexity(&e)
    );
    println!(
        "e': {} of {} rows used, perplexity {:.2}",
        used(&ep),
        ep.len(),
        perplexity(&ep)
    );
    println!("histogram {}", path.display());
    Ok(())
}
