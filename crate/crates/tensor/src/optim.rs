//! Adam and AdamW with bias correction.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// L2 penalty for `Adam`, decoupled decay for `AdamW`.
    pub weight_decay: f32,
}

impl OptimizerConfig {
    /// Running-average coefficients used for the patch auto-encoder.
    pub fn pvqvae() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// Running-average coefficients used for the transformer.
    pub fn transformer() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment state. Parameter order must stay fixed between
/// calls to [`Optimizer::step`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Restores saved state; moment shapes are checked on the next update.
    pub fn restore(&mut self, first: Vec<Tensor>, second: Vec<Tensor>, step: u64) -> Result<()> {
        if first.len() != second.len() {
            return Err(TensorError::InvalidArgument(format!(
                "optimizer restore: {} first moments vs {} second moments",
                first.len(),
                second.len()
            )));
        }
        self.first = first;
        self.second = second;
        self.step = step;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::InvalidArgument(format!(
                "optimizer: {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(TensorError::InvalidArgument(format!("optimizer: learning rate must be positive, got {lr}")));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(TensorError::InvalidArgument(format!(
                "optimizer: state holds {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (m, p) in self.first.iter().zip(params.iter()) {
            if m.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: m.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let OptimizerConfig { kind, beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            for (i, (&gi, (mi, vi))) in g
                .data()
                .iter()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .enumerate()
            {
                let gi = match kind {
                    OptimizerKind::Adam => gi + weight_decay * pd[i],
                    OptimizerKind::AdamW => gi,
                };
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if kind == OptimizerKind::AdamW {
                    pd[i] -= lr * weight_decay * pd[i];
                }
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
