use std::hash::{Hash, Hasher};

use put_tensor::{Bound, Params, Tape, Tensor, Var};

use super::codebook::{DualCodebook, QuantizeMode, Quantized};
use super::config::PvqvaeConfig;
use super::decoder::Decoder;
use super::encoder::Encoder;
use super::masked::{MaskedImage, TokenGrid};
use super::patches::partition_patches;
use crate::error::{Error, Result};
use crate::io::{Checkpoint, Image, Mask};
use crate::rng::stream;

/// Patch encoder, dual codebook and guided decoder.
#[derive(Clone, Debug)]
pub struct PVqVae {
    config: PvqvaeConfig,
    params: Params,
    encoder: Encoder,
    decoder: Decoder,
    codebook: DualCodebook,
}

impl PVqVae {
    pub fn new(config: PvqvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0x5051]);
        let mut params = Params::new();
        let encoder = Encoder::new(&mut params, config.patch_len(), config.feature_dim, &mut rng);
        let decoder = Decoder::new(&mut params, &config, &mut rng);
        let codebook = DualCodebook::new(
            config.codebook_size,
            config.masked_codebook_size,
            config.feature_dim,
            &mut rng,
        );
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn config(&self) -> &PvqvaeConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn codebook(&self) -> &DualCodebook {
        &self.codebook
    }

    pub fn codebook_mut(&mut self) -> &mut DualCodebook {
        &mut self.codebook
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Params, &mut DualCodebook) {
        (&mut self.params, &mut self.codebook)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars() + self.codebook.e().numel() + self.codebook.e_prime().numel()
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        if (image.height(), image.width(), image.channels()) != (c.height, c.width, c.in_channels) {
            return Err(Error::SizeMismatch {
                expected: format!("{}x{}x{}", c.height, c.width, c.in_channels),
                found: format!("{}x{}x{}", image.height(), image.width(), image.channels()),
            });
        }
        Ok(())
    }

    /// Masks `image` and builds its ratio pyramid at this model's patch size.
    pub fn mask_image(&self, image: &Image, mask: &Mask) -> Result<MaskedImage> {
        self.check_image(image)?;
        MaskedImage::new(image, mask, self.config.patch_size)
    }

    /// Encoder on the tape: `[P, D]` features of `pixels`.
    pub(crate) fn encode_var(&self, tape: &mut Tape, bound: &Bound, pixels: &Image) -> Result<Var> {
        self.check_image(pixels)?;
        let patches = tape.constant(partition_patches(pixels, self.config.patch_size)?);
        self.encoder.forward(tape, bound, patches)
    }

    /// `[P, D]` features of an (already masked) image, one row per patch.
    pub fn encode(&self, pixels: &Image) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let f = self.encode_var(&mut tape, &bound, pixels)?;
        Ok(tape.value(f).clone())
    }

    pub fn encode_masked(&self, image: &MaskedImage) -> Result<Tensor> {
        self.encode(image.pixels())
    }

    /// Quantizes features and records codebook usage.
    pub fn quantize(&mut self, features: &Tensor, ratios: &[f32], mode: QuantizeMode<'_>) -> Result<Quantized> {
        self.codebook.quantize(features, ratios, mode)
    }

    /// Hard tokenization without touching usage counts.
    pub fn tokenize(&self, image: &MaskedImage) -> Result<(TokenGrid, Tensor)> {
        let f = self.encode_masked(image)?;
        let q = self.codebook.nearest(&f, image.cell_ratios())?;
        let (h, w) = self.config.grid();
        Ok((TokenGrid::from_quantized(h, w, q.tokens, image.cell_ratios()), f))
    }

    /// `[P, D]` to `1×D×h×w` on the tape.
    pub(crate) fn to_map(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let (h, w) = self.config.grid();
        let d = self.config.feature_dim;
        let x = tape.reshape(rows, &[h, w, d])?;
        let x = tape.permute(x, &[2, 0, 1])?;
        Ok(tape.reshape(x, &[1, d, h, w])?)
    }

    pub(crate) fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    fn check_quantized(&self, quantized: &Tensor) -> Result<()> {
        let want = [self.config.cells(), self.config.feature_dim];
        if quantized.shape() != want {
            return Err(Error::SizeMismatch {
                expected: format!("{want:?} quantized features"),
                found: format!("{:?}", quantized.shape()),
            });
        }
        Ok(())
    }

    /// Decoder output before compositing.
    pub fn decode_raw(&self, quantized: &Tensor, reference: &MaskedImage) -> Result<Image> {
        self.check_quantized(quantized)?;
        self.check_image(reference.pixels())?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let q = tape.constant(quantized.clone());
        let z = self.to_map(&mut tape, q)?;
        let out = if self.decoder.has_reference() {
            let img = tape.constant(reference.pixels().to_nchw());
            self.decoder.forward(&mut tape, &bound, z, Some((img, reference.levels())))?
        } else {
            self.decoder.forward(&mut tape, &bound, z, None)?
        };
        Image::from_nchw(tape.value(out))
    }

    /// Guided decode, then kept pixels are pasted back from the reference.
    pub fn decode(&self, quantized: &Tensor, reference: &MaskedImage) -> Result<Image> {
        let decoded = self.decode_raw(quantized, reference)?;
        composite(&decoded, reference)
    }

    /// Main branch only.
    pub fn decode_plain(&self, quantized: &Tensor) -> Result<Image> {
        self.check_quantized(quantized)?;
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let q = tape.constant(quantized.clone());
        let z = self.to_map(&mut tape, q)?;
        let out = self.decoder.forward(&mut tape, &bound, z, None)?;
        Image::from_nchw(tape.value(out))
    }

    /// Encode the whole image, quantize against `e`, decode plainly.
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        let f = self.encode(image)?;
        let ones = vec![1.0; self.config.cells()];
        let q = self.codebook.nearest(&f, &ones)?;
        self.decode_plain(&q.vectors)
    }

    /// Stable digest of every parameter and codebook bit.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for t in self.params.tensors().chain([self.codebook.e(), self.codebook.e_prime()]) {
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
        ck.push_f32(format!("{prefix}/codebook.e"), self.codebook.e().clone());
        ck.push_f32(format!("{prefix}/codebook.e_prime"), self.codebook.e_prime().clone());
        let (ue, up) = self.codebook.usage();
        ck.push_u64(format!("{prefix}/codebook.usage_e"), ue.to_vec());
        ck.push_u64(format!("{prefix}/codebook.usage_e_prime"), up.to_vec());
    }

    /// Rebuilds the model from `ck`; every tensor must be present with the
    /// shape implied by the stored config.
    pub fn read_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let config = PvqvaeConfig::read(ck, prefix)?;
        let mut model = Self::new(config, 0)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let shape = model.params.get(model.params.find(&name).expect("own name")).shape().to_vec();
            let t = ck.f32_shaped(&format!("{prefix}/{name}"), &shape)?;
            model.params.assign(&name, t.clone())?;
        }
        let (k, kp, d) = (
            model.config.codebook_size,
            model.config.masked_codebook_size,
            model.config.feature_dim,
        );
        let e = ck.f32_shaped(&format!("{prefix}/codebook.e"), &[k, d])?.clone();
        let ep = ck.f32_shaped(&format!("{prefix}/codebook.e_prime"), &[kp, d])?.clone();
        let mut codebook = DualCodebook::from_tables(e, ep)?;
        codebook.set_usage(
            ck.u64(&format!("{prefix}/codebook.usage_e"))?.to_vec(),
            ck.u64(&format!("{prefix}/codebook.usage_e_prime"))?.to_vec(),
        )?;
        model.codebook = codebook;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut ck = Checkpoint::new();
        ck.set("kind", "pvqvae");
        self.write_checkpoint(&mut ck, "pvqvae");
        ck.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::read_checkpoint(&ck, "pvqvae")
    }
}

/// `m ⊗ x̂ ⊕ (1 − m) ⊗ decoded`, pixel for pixel.
pub fn composite(decoded: &Image, reference: &MaskedImage) -> Result<Image> {
    let kept = reference.pixels();
    decoded.same_size(kept)?;
    let c = decoded.channels();
    let mut out = decoded.clone();
    for (i, &keep) in reference.mask().keep().iter().enumerate() {
        if keep {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&kept.data()[i * c..(i + 1) * c]);
        }
    }
    Ok(out)
}
