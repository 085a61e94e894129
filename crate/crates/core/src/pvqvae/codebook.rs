use put_tensor::Tensor;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gumbel};

use crate::error::{Error, Result};

/// How features are assigned to codebook rows.
pub enum QuantizeMode<'a> {
    /// Nearest row by squared Euclidean distance.
    Hard,
    /// `argmax softmax((noise_scale·g − d) / τ)` with `g ~ Gumbel(0, 1)`.
    Gumbel {
        tau: f64,
        noise_scale: f64,
        rng: &'a mut dyn RngCore,
    },
}

/// Output of [`DualCodebook::assign`].
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    /// Global ids: `k` for `e`, `K + k′` for `e′`.
    pub tokens: Vec<usize>,
    /// `[P, D]` retrieved rows.
    pub vectors: Tensor,
    /// `[P, K + K′]` Gumbel draws (Gumbel mode only); entries outside a
    /// cell's codebook are drawn but unused.
    pub noise: Option<Tensor>,
}

/// Unmasked table `e` (`K×D`) and masked table `e′` (`K′×D`).
#[derive(Clone, Debug, PartialEq)]
pub struct DualCodebook {
    e: Tensor,
    e_prime: Tensor,
    usage_e: Vec<u64>,
    usage_e_prime: Vec<u64>,
}

impl DualCodebook {
    /// Entries uniform in `[−1/n, 1/n]` with `n` the table's row count.
    pub fn new(k: usize, k_prime: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut table = |n: usize| {
            let b = 1.0 / n as f32;
            Tensor::from_fn([n, dim], |_| rng.random_range(-b..=b))
        };
        let e = table(k);
        let e_prime = table(k_prime);
        Self::from_tables(e, e_prime).expect("shapes built consistently")
    }

    pub fn from_tables(e: Tensor, e_prime: Tensor) -> Result<Self> {
        if e.ndim() != 2 || e_prime.ndim() != 2 || e.shape()[1] != e_prime.shape()[1] {
            return Err(Error::SizeMismatch {
                expected: "two [rows, D] tables with equal D".into(),
                found: format!("{:?} and {:?}", e.shape(), e_prime.shape()),
            });
        }
        if !e.is_finite() || !e_prime.is_finite() {
            return Err(Error::Tensor(put_tensor::TensorError::NumericFault { op: "codebook" }));
        }
        let (k, kp) = (e.shape()[0], e_prime.shape()[0]);
        Ok(Self {
            e,
            e_prime,
            usage_e: vec![0; k],
            usage_e_prime: vec![0; kp],
        })
    }

    pub fn k(&self) -> usize {
        self.e.shape()[0]
    }

    pub fn k_prime(&self) -> usize {
        self.e_prime.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.e.shape()[1]
    }

    pub fn e(&self) -> &Tensor {
        &self.e
    }

    pub fn e_prime(&self) -> &Tensor {
        &self.e_prime
    }

    pub(crate) fn tables_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.e, &mut self.e_prime]
    }

    pub fn usage(&self) -> (&[u64], &[u64]) {
        (&self.usage_e, &self.usage_e_prime)
    }

    pub(crate) fn set_usage(&mut self, e: Vec<u64>, e_prime: Vec<u64>) -> Result<()> {
        if e.len() != self.k() || e_prime.len() != self.k_prime() {
            return Err(Error::Checkpoint("usage histogram length does not match codebook".into()));
        }
        self.usage_e = e;
        self.usage_e_prime = e_prime;
        Ok(())
    }

    pub fn reset_usage(&mut self) {
        self.usage_e.fill(0);
        self.usage_e_prime.fill(0);
    }

    /// Rows of `e` and of `e′` that were selected at least once.
    pub fn distinct_used(&self) -> (usize, usize) {
        (
            self.usage_e.iter().filter(|&&c| c > 0).count(),
            self.usage_e_prime.iter().filter(|&&c| c > 0).count(),
        )
    }

    pub fn record_usage(&mut self, tokens: &[usize]) {
        let k = self.k();
        for &t in tokens {
            if t < k {
                self.usage_e[t] += 1;
            } else if t - k < self.usage_e_prime.len() {
                self.usage_e_prime[t - k] += 1;
            }
        }
    }

    /// Codebook row for a global token id.
    pub fn row(&self, token: usize) -> Result<&[f32]> {
        let k = self.k();
        if token < k {
            Ok(self.e.row(token))
        } else if token < k + self.k_prime() {
            Ok(self.e_prime.row(token - k))
        } else {
            Err(Error::TokenOutOfRange {
                token,
                limit: k + self.k_prime(),
            })
        }
    }

    /// `[P, D]` rows for `tokens`.
    pub fn lookup(&self, tokens: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            out.extend_from_slice(self.row(t)?);
        }
        Ok(Tensor::new([tokens.len(), d], out)?)
    }

    /// Assigns every feature row to a codebook row without touching usage counts.
    /// Cells with ratio exactly 1 use `e`, all others `e′`.
    pub fn assign(&self, features: &Tensor, ratios: &[f32], mode: QuantizeMode<'_>) -> Result<Quantized> {
        let d = self.dim();
        if features.ndim() != 2 || features.shape()[1] != d || features.shape()[0] != ratios.len() {
            return Err(Error::SizeMismatch {
                expected: format!("[{}, {d}] features", ratios.len()),
                found: format!("{:?}", features.shape()),
            });
        }
        let (k, kp) = (self.k(), self.k_prime());
        if k == 0 || kp == 0 {
            return Err(Error::EmptyCodebook);
        }
        let p = ratios.len();
        let mut tokens = Vec::with_capacity(p);
        let noise = match mode {
            QuantizeMode::Hard => {
                for (i, &r) in ratios.iter().enumerate() {
                    let (table, offset) = if r == 1.0 { (&self.e, 0) } else { (&self.e_prime, k) };
                    tokens.push(offset + nearest_row(features.row(i), table));
                }
                None
            }
            QuantizeMode::Gumbel { tau, noise_scale, rng } => {
                if !(tau > 0.0) {
                    return Err(Error::InvalidArgument(format!("gumbel temperature must be positive, got {tau}")));
                }
                let g = Gumbel::new(0.0, 1.0).expect("unit gumbel");
                let noise: Vec<f32> = (0..p * (k + kp)).map(|_| g.sample(rng) as f32).collect();
                for (i, &r) in ratios.iter().enumerate() {
                    let (table, offset) = if r == 1.0 { (&self.e, 0) } else { (&self.e_prime, k) };
                    let row_noise = &noise[i * (k + kp) + offset..][..table.shape()[0]];
                    tokens.push(offset + gumbel_row(features.row(i), table, row_noise, tau, noise_scale));
                }
                Some(Tensor::new([p, k + kp], noise)?)
            }
        };
        let vectors = self.lookup(&tokens)?;
        Ok(Quantized {
            tokens,
            vectors,
            noise,
        })
    }

    /// [`assign`](Self::assign) followed by a usage-count update.
    pub fn quantize(&mut self, features: &Tensor, ratios: &[f32], mode: QuantizeMode<'_>) -> Result<Quantized> {
        let q = self.assign(features, ratios, mode)?;
        self.record_usage(&q.tokens);
        Ok(q)
    }

    /// Hard assignment: shorthand for `assign(.., Hard)`.
    pub fn nearest(&self, features: &Tensor, ratios: &[f32]) -> Result<Quantized> {
        self.assign(features, ratios, QuantizeMode::Hard)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Lowest index among the rows at minimum squared distance.
fn nearest_row(f: &[f32], table: &Tensor) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for j in 0..table.shape()[0] {
        let d = sq_dist(f, table.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn gumbel_row(f: &[f32], table: &Tensor, noise: &[f32], tau: f64, scale: f64) -> usize {
    let logits: Vec<f64> = (0..table.shape()[0])
        .map(|j| (scale * f64::from(noise[j]) - sq_dist(f, table.row(j)).sqrt()) / tau)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut best = 0;
    for (j, &v) in exps.iter().enumerate() {
        if v / z > exps[best] / z {
            best = j;
        }
    }
    best
}
