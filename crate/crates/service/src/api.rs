//! Request and response bodies.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use put_core::io::{decode_gray, decode_image, encode_png, ConditionSet, Image, Mask, SemanticMap, SketchMap};
use put_core::pvqvae::TokenGrid;
use put_core::sampler::{SamplerConfig, K1};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Upper bound on `n_samples` per request.
pub const MAX_SAMPLES: usize = 16;

/// Body of `POST /v1/sessions` and `POST /v1/inpaint`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintRequest {
    /// Base64 PNG, RGB.
    pub image: String,
    /// Base64 PNG, single channel: 255 (or 1) keeps, 0 is missing.
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<Conditions>,
    #[serde(default)]
    pub config: RequestConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditions {
    /// Base64 PNG of category ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<String>,
    /// Base64 binary PNG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestConfig {
    /// Cells per iteration, or `"all"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<K1Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum K1Value {
    Count(usize),
    Keyword(String),
}

impl RequestConfig {
    /// Fills unset fields from the sampler defaults; `k2` is capped at the vocabulary.
    pub fn resolve(&self, vocab: usize) -> Result<SamplerConfig, ApiError> {
        let d = SamplerConfig::default();
        let k1 = match &self.k1 {
            None => d.k1,
            Some(K1Value::Count(n)) => K1::Top(*n),
            Some(K1Value::Keyword(s)) if s.eq_ignore_ascii_case("all") => K1::All,
            Some(K1Value::Keyword(s)) => {
                return Err(ApiError::bad_request("config.k1", format!("expected a count or \"all\", got {s:?}")))
            }
        };
        let config = SamplerConfig {
            k1,
            k2: self.k2.unwrap_or(d.k2.min(vocab)),
            n_samples: self.n_samples.unwrap_or(d.n_samples),
            seed: self.seed.unwrap_or(d.seed),
        };
        if config.n_samples > MAX_SAMPLES {
            return Err(ApiError::bad_request(
                "config.n_samples",
                format!("n_samples {} exceeds {MAX_SAMPLES}", config.n_samples),
            ));
        }
        config
            .validate(vocab)
            .map_err(|e| ApiError::from_core(e, Some("config")).with_status(axum::http::StatusCode::BAD_REQUEST))?;
        Ok(config)
    }
}

/// A request with every field decoded and checked against the model size.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub image: Image,
    pub mask: Mask,
    pub conditions: ConditionSet,
    pub config: SamplerConfig,
}

fn base64_field(field: &str, value: &str) -> Result<Vec<u8>, ApiError> {
    STANDARD
        .decode(value.trim())
        .map_err(|e| ApiError::bad_request(field, format!("invalid base64: {e}")))
}

fn check_size(field: &str, (h, w): (usize, usize), (eh, ew): (usize, usize)) -> Result<(), ApiError> {
    if (h, w) != (eh, ew) {
        return Err(ApiError::bad_request(field, format!("expected {eh}x{ew}, got {h}x{w}")));
    }
    Ok(())
}

impl InpaintRequest {
    pub fn decode(&self, height: usize, width: usize, vocab: usize) -> Result<Decoded, ApiError> {
        let image = decode_image(&base64_field("image", &self.image)?).map_err(|e| ApiError::from_core(e, Some("image")))?;
        check_size("image", (image.height(), image.width()), (height, width))?;
        let gray = decode_gray(&base64_field("mask", &self.mask)?).map_err(|e| ApiError::from_core(e, Some("mask")))?;
        check_size("mask", (gray.height, gray.width), (height, width))?;
        let mask = Mask::from_gray(&gray).map_err(|e| ApiError::from_core(e, Some("mask")))?;

        let mut conditions = ConditionSet::none();
        if let Some(c) = &self.conditions {
            if let Some(s) = &c.semantic {
                let field = "conditions.semantic";
                let gray = decode_gray(&base64_field(field, s)?).map_err(|e| ApiError::from_core(e, Some(field)))?;
                check_size(field, (gray.height, gray.width), (height, width))?;
                conditions.semantic = Some(SemanticMap::from_gray(&gray));
            }
            if let Some(s) = &c.sketch {
                let field = "conditions.sketch";
                let gray = decode_gray(&base64_field(field, s)?).map_err(|e| ApiError::from_core(e, Some(field)))?;
                check_size(field, (gray.height, gray.width), (height, width))?;
                conditions.sketch = Some(SketchMap::from_gray(&gray).map_err(|e| ApiError::from_core(e, Some(field)))?);
            }
        }
        Ok(Decoded {
            image,
            mask,
            conditions,
            config: self.config.resolve(vocab)?,
        })
    }
}

pub fn png_base64(image: &Image) -> Result<String, ApiError> {
    Ok(STANDARD.encode(encode_png(image)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub i: usize,
    pub j: usize,
}

impl Cell {
    pub fn from_index(index: usize, grid_width: usize) -> Self {
        Self {
            i: index / grid_width,
            j: index % grid_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub grid: Grid,
    pub masked_cells: usize,
    pub iterations_expected: usize,
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub iteration: usize,
    /// Cells filled in sample 0, most confident first.
    pub filled_cells: Vec<Cell>,
    /// Cells filled in every sample; samples diverge after their first draw.
    pub filled_cells_per_sample: Vec<Vec<Cell>>,
    pub previews: Vec<String>,
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGridBody {
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<usize>,
    /// `unmasked`, `masked_pending` or `inpainted` per cell.
    pub provenance: Vec<String>,
}

impl From<&TokenGrid> for TokenGridBody {
    fn from(g: &TokenGrid) -> Self {
        Self {
            h: g.height,
            w: g.width,
            tokens: g.tokens.clone(),
            provenance: g.provenance.iter().map(|p| p.as_str().to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultResponse {
    pub images: Vec<String>,
    pub tokens: Vec<TokenGridBody>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub images: Vec<String>,
    pub tokens: Vec<TokenGridBody>,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub r: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "K_prime")]
    pub k_prime: usize,
    pub grid: Grid,
    pub height: usize,
    pub width: usize,
    pub with_conditions: bool,
}

impl ModelInfo {
    pub fn new(p: &put_core::pvqvae::PvqvaeConfig, with_conditions: bool) -> Self {
        let (h, w) = p.grid();
        Self {
            r: p.patch_size,
            d: p.feature_dim,
            k: p.codebook_size,
            k_prime: p.masked_codebook_size,
            grid: Grid { h, w },
            height: p.height,
            width: p.width,
            with_conditions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
}
