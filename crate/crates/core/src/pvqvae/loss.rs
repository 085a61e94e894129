use put_tensor::{Real, Tape, Var};

use crate::error::Result;

/// Loss graph node plus the scalar value of each term.
#[derive(Clone, Copy, Debug)]
pub struct VqLoss<T = f32> {
    pub total: Var,
    pub recon: T,
    pub codebook: T,
    pub commit: T,
}

/// `mean|x̂ᴿ − x| + mean(sg[f̂] − ê)² + β·mean(f̂ − sg[ê])²`.
pub fn vqvae_loss<T: Real>(
    tape: &mut Tape<T>,
    target: Var,
    recon: Var,
    features: Var,
    quantized: Var,
    beta: T,
) -> Result<VqLoss<T>> {
    let diff = tape.sub(recon, target)?;
    let abs = tape.abs(diff)?;
    let l_recon = tape.mean(abs)?;

    let f_sg = tape.detach(features);
    let d = tape.sub(f_sg, quantized)?;
    let sq = tape.square(d)?;
    let l_codebook = tape.mean(sq)?;

    let q_sg = tape.detach(quantized);
    let d = tape.sub(features, q_sg)?;
    let sq = tape.square(d)?;
    let m = tape.mean(sq)?;
    let l_commit = tape.scale(m, beta)?;

    let partial = tape.add(l_recon, l_codebook)?;
    let total = tape.add(partial, l_commit)?;
    let value = |v: Var| tape.value(v).data()[0];
    Ok(VqLoss {
        total,
        recon: value(l_recon),
        codebook: value(l_codebook),
        commit: value(l_commit),
    })
}

/// `f̂ + sg[ê − f̂]`: forward value `ê`, gradient passed straight to `f̂`.
pub fn straight_through<T: Real>(tape: &mut Tape<T>, features: Var, quantized: Var) -> Result<Var> {
    let d = tape.sub(quantized, features)?;
    let d = tape.detach(d);
    Ok(tape.add(features, d)?)
}
