use std::hash::{Hash, Hasher};

use put_tensor::{Bound, ParamId, Params, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::TransformerConfig;
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::nn::{LayerNorm, Linear};
use crate::rng::stream;

fn normal(rng: &mut impl Rng, shape: &[usize], std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(params: &mut Params, i: usize, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden_dim;
        let name = |s: &str| format!("block{i}.{s}");
        Self {
            ln1: LayerNorm::new(params, &name("ln1"), h),
            q: Linear::new(params, &name("q"), h, h, rng),
            k: Linear::new(params, &name("k"), h, h, rng),
            v: Linear::new(params, &name("v"), h, h, rng),
            proj: Linear::new(params, &name("proj"), h, h, rng),
            ln2: LayerNorm::new(params, &name("ln2"), h),
            fc1: Linear::new(params, &name("fc1"), h, cfg.mlp_dim(), rng),
            fc2: Linear::new(params, &name("fc2"), cfg.mlp_dim(), h, rng),
        }
    }

    fn heads(tape: &mut Tape, x: Var, t: usize, nh: usize, dh: usize, perm: &[usize]) -> Result<Var> {
        let x = tape.reshape(x, &[t, nh, dh])?;
        Ok(tape.permute(x, perm)?)
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, cfg: &TransformerConfig) -> Result<Var> {
        let t = tape.shape(x)[0];
        let (nh, dh) = (cfg.heads, cfg.head_dim());

        let h = self.ln1.forward(tape, bound, x)?;
        let q = self.q.forward(tape, bound, h)?;
        let k = self.k.forward(tape, bound, h)?;
        let v = self.v.forward(tape, bound, h)?;
        let q = Self::heads(tape, q, t, nh, dh, &[1, 0, 2])?;
        let kt = Self::heads(tape, k, t, nh, dh, &[1, 2, 0])?;
        let v = Self::heads(tape, v, t, nh, dh, &[1, 0, 2])?;
        let scores = tape.batch_matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = tape.softmax(scores)?;
        let o = tape.batch_matmul(attn, v)?;
        let o = tape.permute(o, &[1, 0, 2])?;
        let o = tape.reshape(o, &[t, cfg.hidden_dim])?;
        let o = self.proj.forward(tape, bound, o)?;
        let x = tape.add(x, o)?;

        let h = self.ln2.forward(tape, bound, x)?;
        let h = self.fc1.forward(tape, bound, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, bound, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Learned embeddings of the input grid.
#[derive(Clone, Copy, Debug)]
struct Embeddings {
    /// `F`: projection `D → D′` of encoder features.
    proj_w: ParamId,
    proj_b: ParamId,
    /// `f^P`: `[h·w, D′]`.
    pos: ParamId,
    /// `f^M`: `[1, D′]`, shared by every cell.
    mask: ParamId,
    /// Condition placeholders, `[1, D]` each.
    ph_sem: Option<ParamId>,
    ph_str: Option<ParamId>,
}

/// Transformer over un-quantized patch features that predicts a distribution
/// over the unmasked codebook at every grid cell.
#[derive(Clone, Debug)]
pub struct UqTransformer {
    config: TransformerConfig,
    params: Params,
    emb: Embeddings,
    blocks: Vec<Block>,
    ln_f: Option<LayerNorm>,
    head: Linear,
}

impl UqTransformer {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0x7571]);
        let mut params = Params::new();
        let dp = config.input_dim;
        let proj = Linear::new(&mut params, "emb.f", config.feature_dim, dp, &mut rng);
        let pos = params.add("emb.pos", normal(&mut rng, &[config.cells(), dp], 0.02));
        let mask = params.add("emb.mask", normal(&mut rng, &[1, dp], 0.02));
        let (ph_sem, ph_str) = if config.with_conditions {
            let d = config.condition_dim;
            (
                Some(params.add("emb.ph_sem", normal(&mut rng, &[1, d], 0.02))),
                Some(params.add("emb.ph_str", normal(&mut rng, &[1, d], 0.02))),
            )
        } else {
            (None, None)
        };
        let emb = Embeddings {
            proj_w: proj.weight(),
            proj_b: proj.bias(),
            pos,
            mask,
            ph_sem,
            ph_str,
        };
        let blocks = (0..config.depth)
            .map(|i| Block::new(&mut params, i, &config, &mut rng))
            .collect();
        let ln_f = (config.depth > 0).then(|| LayerNorm::new(&mut params, "ln_f", config.hidden_dim));
        let head = Linear::new(&mut params, "head", config.hidden_dim, config.vocab, &mut rng);
        Ok(Self {
            config,
            params,
            emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head.weight(), self.head.bias())
    }

    pub fn embedding_params(&self) -> EmbeddingIds {
        EmbeddingIds {
            proj_w: self.emb.proj_w,
            proj_b: self.emb.proj_b,
            pos: self.emb.pos,
            mask: self.emb.mask,
            ph_sem: self.emb.ph_sem,
            ph_str: self.emb.ph_str,
        }
    }

    fn check_rows(&self, what: &str, shape: &[usize], cols: usize) -> Result<()> {
        if shape != [self.config.cells(), cols] {
            return Err(Error::SizeMismatch {
                expected: format!("[{}, {cols}] {what}", self.config.cells()),
                found: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// `f̄ = (m↓ ⊗ F(f̂) ⊕ (1 − m↓) ⊗ f^M) ⊕ f^P`, one row per cell.
    pub fn embed_input(&self, tape: &mut Tape, bound: &Bound, features: Var, ratios: &[f32]) -> Result<Var> {
        self.check_rows("features", tape.shape(features), self.config.feature_dim)?;
        if ratios.len() != self.config.cells() {
            return Err(Error::SizeMismatch {
                expected: format!("{} cell ratios", self.config.cells()),
                found: ratios.len().to_string(),
            });
        }
        let n = ratios.len();
        let projected = tape.linear(features, bound[self.emb.proj_w], Some(bound[self.emb.proj_b]))?;
        let keep = tape.constant(Tensor::new([n, 1], ratios.to_vec())?);
        let miss = tape.constant(Tensor::new([n, 1], ratios.iter().map(|r| 1.0 - r).collect())?);
        let a = tape.mul(projected, keep)?;
        let b = tape.mul(bound[self.emb.mask], miss)?;
        let blended = tape.add(a, b)?;
        Ok(tape.add(blended, bound[self.emb.pos])?)
    }

    /// Channel concatenation `(f̄, semantic, sketch)`; an absent condition is
    /// replaced by its placeholder broadcast over the grid.
    pub fn concat_conditions(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        embedded: Var,
        semantic: Option<Var>,
        sketch: Option<Var>,
    ) -> Result<Var> {
        let (Some(ph_sem), Some(ph_str)) = (self.emb.ph_sem, self.emb.ph_str) else {
            return Err(Error::Config("model was built without conditions".into()));
        };
        self.check_rows("embedding", tape.shape(embedded), self.config.input_dim)?;
        let d = self.config.condition_dim;
        let zeros = tape.constant(Tensor::zeros([self.config.cells(), d]));
        let part = |tape: &mut Tape, given: Option<Var>, ph: ParamId, what: &str| -> Result<Var> {
            match given {
                Some(v) => {
                    self.check_rows(what, tape.shape(v), d)?;
                    Ok(v)
                }
                None => Ok(tape.add(zeros, bound[ph])?),
            }
        };
        let s = part(tape, semantic, ph_sem, "semantic features")?;
        let k = part(tape, sketch, ph_str, "sketch features")?;
        Ok(tape.concat(&[embedded, s, k], 1)?)
    }

    /// Transformer blocks and head: `[h·w, hidden]` to `[h·w, K]` logits.
    pub fn forward_logits(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        self.check_rows("transformer input", tape.shape(input), self.config.hidden_dim)?;
        let mut x = input;
        for block in &self.blocks {
            x = block.forward(tape, bound, x, &self.config)?;
        }
        if let Some(ln) = &self.ln_f {
            x = ln.forward(tape, bound, x)?;
        }
        self.head.forward(tape, bound, x)
    }

    /// Full input embedding: blend, then conditions when the model has them.
    pub fn build_input(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &Tensor,
        ratios: &[f32],
        conditions: &ConditionFeatures,
    ) -> Result<Var> {
        let f = tape.constant(features.clone());
        let x = self.embed_input(tape, bound, f, ratios)?;
        if !self.config.with_conditions {
            return Ok(x);
        }
        let s = conditions.semantic.as_ref().map(|t| tape.constant(t.clone()));
        let k = conditions.sketch.as_ref().map(|t| tape.constant(t.clone()));
        self.concat_conditions(tape, bound, x, s, k)
    }

    /// `p̂`: `[h·w, K]` probabilities, rows summing to one.
    pub fn probabilities(&self, features: &Tensor, ratios: &[f32], conditions: &ConditionFeatures) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let x = self.build_input(&mut tape, &bound, features, ratios, conditions)?;
        let logits = self.forward_logits(&mut tape, &bound, x)?;
        let p = tape.softmax(logits)?;
        Ok(tape.value(p).clone())
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for t in self.params.tensors() {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        self.config.write(ck, prefix);
        for (name, t) in self.params.iter() {
            ck.push_f32(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let config = TransformerConfig::read(ck, prefix)?;
        let mut model = Self::new(config, 0)?;
        let names: Vec<(String, Vec<usize>)> = model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let t = ck.f32_shaped(&format!("{prefix}/{name}"), &shape)?;
            model.params.assign(&name, t.clone())?;
        }
        Ok(model)
    }
}

/// Parameter handles of the embedding set, for tests and inspection.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingIds {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub pos: ParamId,
    pub mask: ParamId,
    pub ph_sem: Option<ParamId>,
    pub ph_str: Option<ParamId>,
}

/// Per-cell condition features `[h·w, D]`; `None` means absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionFeatures {
    pub semantic: Option<Tensor>,
    pub sketch: Option<Tensor>,
}

impl ConditionFeatures {
    pub fn none() -> Self {
        Self::default()
    }
}
