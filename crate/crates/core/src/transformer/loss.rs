use put_tensor::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Loss node plus whether the masked set was empty.
#[derive(Clone, Copy, Debug)]
pub struct TokenLoss<T = f32> {
    pub total: Var,
    pub value: T,
    /// `|Π| = 0`: the loss is defined as zero and carries no gradient.
    pub empty: bool,
}

fn check_targets(rows: usize, vocab: usize, targets: &[usize], cells: &[usize]) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::SizeMismatch {
            expected: format!("{rows} targets"),
            found: targets.len().to_string(),
        });
    }
    if let Some(&c) = cells.iter().find(|&&c| c >= rows) {
        return Err(Error::InvalidArgument(format!("cell {c} outside a {rows}-cell grid")));
    }
    if let Some(&t) = cells.iter().map(|&c| &targets[c]).find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token: t, limit: vocab });
    }
    Ok(())
}

/// `−(1/|Π|)·Σ_{c∈Π} log p̂_{c,t_c}` from `[h·w, K]` logits, with `p̂ = softmax(logits)`.
pub fn transformer_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    cells: &[usize],
) -> Result<TokenLoss<T>> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::SizeMismatch {
            expected: "[cells, K] logits".into(),
            found: format!("{shape:?}"),
        });
    }
    check_targets(shape[0], shape[1], targets, cells)?;
    if cells.is_empty() {
        let total = tape.constant(Tensor::scalar(T::zero()));
        return Ok(TokenLoss {
            total,
            value: T::zero(),
            empty: true,
        });
    }
    let rows = tape.embed_lookup(logits, cells)?;
    let logp = tape.log_softmax(rows)?;
    let picked: Vec<usize> = cells.iter().map(|&c| targets[c]).collect();
    let lp = tape.pick(logp, &picked)?;
    let mean = tape.mean(lp)?;
    let total = tape.neg(mean)?;
    Ok(TokenLoss {
        total,
        value: tape.value(total).data()[0],
        empty: false,
    })
}

/// The same loss evaluated directly on probabilities `p̂`; returns `(loss, empty)`.
pub fn nll_loss(probs: &Tensor, targets: &[usize], cells: &[usize]) -> Result<(f64, bool)> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::SizeMismatch {
            expected: "[cells, K] probabilities".into(),
            found: format!("{shape:?}"),
        });
    }
    check_targets(shape[0], shape[1], targets, cells)?;
    if cells.is_empty() {
        return Ok((0.0, true));
    }
    let total: f64 = cells
        .iter()
        .map(|&c| -f64::from(probs.row(c)[targets[c]]).ln())
        .sum();
    Ok((total / cells.len() as f64, false))
}
