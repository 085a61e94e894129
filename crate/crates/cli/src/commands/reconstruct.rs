use std::path::PathBuf;

use put_core::io::{load_image, load_mask, psnr, save_image};
use put_core::pvqvae::PVqVae;

use super::echo_config;
use crate::error::Result;
use crate::settings::{optional, required, settings};

settings!(ReconstructSettings, ReconstructFlags {
    pvqvae: PathBuf = PathBuf::new(),
    image: PathBuf = PathBuf::new(),
    /// With a mask, decode the tokens of the masked image guided by its kept pixels.
    mask: PathBuf = PathBuf::new(),
    out_dir: PathBuf = PathBuf::from("runs/reconstruct"),
});

pub fn run(s: &ReconstructSettings) -> Result<()> {
    echo_config("reconstruct", &s.render(), &s.out_dir)?;
    let model = PVqVae::load(required(&s.pvqvae, "pvqvae")?)?;
    let image = load_image(required(&s.image, "image")?)?;
    let out = match optional(&s.mask) {
        Some(path) => {
            let masked = model.mask_image(&image, &load_mask(path)?)?;
            let (grid, _) = model.tokenize(&masked)?;
            model.decode(&model.codebook().lookup(&grid.tokens)?, &masked)?
        }
        None => model.reconstruct(&image)?,
    };
    let path = s.out_dir.join("reconstruction.png");
    save_image(&out, &path)?;
    println!("psnr {:.2} dB; wrote {}", psnr(&out, &image, None)?, path.display());
    Ok(())
}
