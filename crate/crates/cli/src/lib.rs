//! The `put` command line: corpus generation, training, inpainting,
//! reconstruction, evaluation and codebook statistics.
//!
//! Every setting has a `--flag`; `--config FILE` reads `key = value` lines
//! first, so flags override the file and the file overrides defaults. Each
//! command prints its effective configuration and saves it as
//! `out_dir/config.txt`, which is itself a valid `--config` file.

pub mod commands;
pub mod error;
pub mod settings;

use clap::{Parser, Subcommand};

use commands::codebook_stats::{CodebookStatsFlags, CodebookStatsSettings};
use commands::eval::{EvalFlags, EvalSettings};
use commands::inpaint::{InpaintFlags, InpaintSettings};
use commands::make_toy_corpus::{ToyCorpusFlags, ToyCorpusSettings};
use commands::reconstruct::{ReconstructFlags, ReconstructSettings};
use commands::train_pvqvae::{TrainPvqvaeFlags, TrainPvqvaeSettings};
use commands::train_transformer::{TrainTransformerFlags, TrainTransformerSettings};
pub use error::{CliError, Result};

#[derive(Parser, Debug)]
#[command(name = "put", version, about = "Pluralistic image inpainting with a patch VQ-VAE and a transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic rectangle corpus with semantic and sketch maps.
    MakeToyCorpus(ToyCorpusFlags),
    /// Train the patch VQ-VAE.
    TrainPvqvae(TrainPvqvaeFlags),
    /// Train the transformer against a frozen patch VQ-VAE.
    TrainTransformer(TrainTransformerFlags),
    /// Fill the missing region of an image.
    Inpaint(InpaintFlags),
    /// Encode, quantize and decode one image.
    Reconstruct(ReconstructFlags),
    /// Image and token metrics per hole-ratio bucket.
    Eval(EvalFlags),
    /// Codebook usage histogram and perplexity.
    CodebookStats(CodebookStatsFlags),
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeToyCorpus(f) => commands::make_toy_corpus::run(&ToyCorpusSettings::resolve(f)?),
        Command::TrainPvqvae(f) => commands::train_pvqvae::run(&TrainPvqvaeSettings::resolve(f)?),
        Command::TrainTransformer(f) => commands::train_transformer::run(&TrainTransformerSettings::resolve(f)?),
        Command::Inpaint(f) => commands::inpaint::run(&InpaintSettings::resolve(f)?),
        Command::Reconstruct(f) => commands::reconstruct::run(&ReconstructSettings::resolve(f)?),
        Command::Eval(f) => commands::eval::run(&EvalSettings::resolve(f)?),
        Command::CodebookStats(f) => commands::codebook_stats::run(&CodebookStatsSettings::resolve(f)?),
    }
}
