//! Learning-rate and Gumbel-temperature schedules.

use std::f64::consts::PI;

/// Linear warm-up from `start_lr` to `peak_lr`, then cosine decay to
/// `final_lr` at `total_steps`; constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    /// 0 → 2e-4 over 5k steps.
    pub fn pvqvae(total_steps: u64) -> Self {
        Self {
            start_lr: 0.0,
            peak_lr: 2e-4,
            final_lr: 0.0,
            warmup_steps: 5_000,
            total_steps,
        }
    }

    /// 1e-5 → 1.5e-3 over 20k steps.
    pub fn transformer(total_steps: u64) -> Self {
        Self {
            start_lr: 1e-5,
            peak_lr: 1.5e-3,
            final_lr: 0.0,
            warmup_steps: 20_000,
            total_steps,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        let warmup = self.warmup_steps.max(1);
        if step < warmup {
            let t = step as f64 / warmup as f64;
            return self.start_lr + (self.peak_lr - self.start_lr) * t;
        }
        let decay = self.total_steps.saturating_sub(warmup);
        if decay == 0 {
            return self.peak_lr;
        }
        let t = ((step - warmup) as f64 / decay as f64).min(1.0);
        self.final_lr + (self.peak_lr - self.final_lr) * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// Warm-up from 0 to `peak_lr`, cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, warmup_steps: u64, peak_lr: f64, total_steps: u64) -> f64 {
    LrSchedule {
        start_lr: 0.0,
        peak_lr,
        final_lr: 0.0,
        warmup_steps,
        total_steps,
    }
    .at(step)
}

/// Cosine-annealed Gumbel temperature with a step change in noise scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_steps: u64,
    pub noise_scale_early: f64,
    pub noise_scale_late: f64,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        Self {
            tau_start: 20.0,
            tau_end: 1e-6,
            anneal_steps: 5_000,
            noise_scale_early: 1.0,
            noise_scale_late: 0.1,
        }
    }
}

impl GumbelSchedule {
    /// `(temperature, noise_scale)` at `step`.
    pub fn at(&self, step: u64) -> (f64, f64) {
        let span = self.anneal_steps.max(1);
        let t = step.min(span) as f64 / span as f64;
        let tau = self.tau_end + (self.tau_start - self.tau_end) * 0.5 * (1.0 + (PI * t).cos());
        let noise = if step <= self.anneal_steps {
            self.noise_scale_early
        } else {
            self.noise_scale_late
        };
        (tau, noise)
    }
}

/// Temperature 20 → 1e-6 over 5k steps; noise scale 1, then 0.1.
pub fn gumbel_schedule(step: u64) -> (f64, f64) {
    GumbelSchedule::default().at(step)
}
