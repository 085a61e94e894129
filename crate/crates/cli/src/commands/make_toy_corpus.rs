use std::path::PathBuf;

use put_core::io::{save_image, toy_corpus};

use super::{create_dir, echo_config};
use crate::error::Result;
use crate::settings::settings;

settings!(ToyCorpusSettings, ToyCorpusFlags {
    /// Output directory; maps go to semantic/ and sketch/ below it.
    out_dir: PathBuf = PathBuf::from("toy-corpus"),
    count: usize = 16,
    height: usize = 32,
    width: usize = 32,
    seed: u64 = 0,
});

pub fn run(s: &ToyCorpusSettings) -> Result<()> {
    echo_config("make-toy-corpus", &s.render(), &s.out_dir)?;
    let semantic = s.out_dir.join("semantic");
    let sketch = s.out_dir.join("sketch");
    create_dir(&semantic)?;
    create_dir(&sketch)?;
    for (i, sample) in toy_corpus(s.count, s.height, s.width, s.seed).iter().enumerate() {
        let name = format!("toy_{i:04}.png");
        save_image(&sample.image, s.out_dir.join(&name))?;
        sample.semantic.to_gray()?.save(semantic.join(&name))?;
        sample.sketch.to_gray().save(sketch.join(&name))?;
    }
    println!("wrote {} images to {}", s.count, s.out_dir.display());
    Ok(())
}
