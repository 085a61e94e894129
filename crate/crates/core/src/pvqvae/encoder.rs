use put_tensor::{Bound, Params, Tape, Var};
use rand::Rng;

use crate::error::Result;
use crate::nn::Linear;

/// Shared per-patch MLP: `r·r·C → 2D → GELU → 2D → GELU → D`.
#[derive(Clone, Debug)]
pub struct Encoder {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl Encoder {
    pub fn new(params: &mut Params, patch_len: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(params, "enc.l1", patch_len, 2 * dim, rng),
            l2: Linear::new(params, "enc.l2", 2 * dim, 2 * dim, rng),
            l3: Linear::new(params, "enc.l3", 2 * dim, dim, rng),
        }
    }

    /// `[P, r·r·C]` patches to `[P, D]` features.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, patches: Var) -> Result<Var> {
        let h = self.l1.forward(tape, bound, patches)?;
        let h = tape.gelu(h)?;
        let h = self.l2.forward(tape, bound, h)?;
        let h = tape.gelu(h)?;
        self.l3.forward(tape, bound, h)
    }
}
