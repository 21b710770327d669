//! Hue compensation of selected images.
//!
//! Each selected image is re-rendered twice, once under a cool hue prompt and
//! once under a warm one. The rendering itself is delegated to a [`Backend`]:
//! [`HttpBackend`] calls an image-to-image diffusion service, while
//! [`FallbackBackend`] applies a fixed white-balance shift so the whole
//! pipeline runs offline.

mod http;

use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub use http::{CompensateRequestBody, CompensateResponseBody, HttpBackend, RetryPolicy};

pub const DEFAULT_GUIDANCE_SCALE: f64 = 4.0;

/// Channel gains of the offline transform, (R, G, B).
pub const COOL_GAINS: [f64; 3] = [0.85, 0.95, 1.15];
pub const WARM_GAINS: [f64; 3] = [1.15, 1.05, 0.85];

#[derive(Debug, Error)]
pub enum CompensateError {
    #[error("compensation backend unreachable at {0}")]
    BackendUnreachable(String),
    #[error("compensation backend returned status {status}: {body}")]
    BackendError { status: u16, body: String },
    #[error("backend returned a {got_w}x{got_h} image for a {want_w}x{want_h} input")]
    DimensionMismatch { want_w: u32, want_h: u32, got_w: u32, got_h: u32 },
    #[error("prompt catalog has no {0} entry")]
    EmptyFamily(HueFamily),
    #[error("invalid compensation request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HueFamily {
    Cool,
    Warm,
}

impl fmt::Display for HueFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HueFamily::Cool => "cool",
            HueFamily::Warm => "warm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HuePrompt {
    pub text: String,
    pub family: HueFamily,
}

impl HuePrompt {
    pub fn new(text: &str, family: HueFamily) -> Self {
        Self { text: text.to_string(), family }
    }
}

/// The built-in instruction prompts, five per family.
pub fn default_catalog() -> Vec<HuePrompt> {
    let cool = ["rainy", "snowy", "infrared", "underwater", "frozen lake"];
    let warm = ["sepia", "sunny", "daylight", "vivid colors", "golden hour"];
    cool.iter()
        .map(|t| HuePrompt::new(t, HueFamily::Cool))
        .chain(warm.iter().map(|t| HuePrompt::new(t, HueFamily::Warm)))
        .collect()
}

/// Draws one cool and one warm prompt from `catalog`.
pub fn pick_prompts(
    catalog: &[HuePrompt],
    seed: u64,
) -> Result<(HuePrompt, HuePrompt), CompensateError> {
    let family = |f: HueFamily| -> Result<Vec<&HuePrompt>, CompensateError> {
        let v: Vec<_> = catalog.iter().filter(|p| p.family == f).collect();
        if v.is_empty() {
            Err(CompensateError::EmptyFamily(f))
        } else {
            Ok(v)
        }
    };
    let cool = family(HueFamily::Cool)?;
    let warm = family(HueFamily::Warm)?;
    let mut rng = SplitMix64::new(seed);
    let c = cool[rng.below(cool.len())].clone();
    let w = warm[rng.below(warm.len())].clone();
    Ok((c, w))
}

#[derive(Debug, Clone)]
pub struct CompensationRequest<'a> {
    pub image: &'a RgbImage,
    pub prompt: HuePrompt,
    pub seed: u64,
    pub guidance_scale: f64,
}

impl CompensationRequest<'_> {
    fn validate(&self) -> Result<(), CompensateError> {
        if self.image.width() == 0 || self.image.height() == 0 {
            return Err(CompensateError::InvalidRequest("image is empty".into()));
        }
        if self.prompt.text.is_empty() {
            return Err(CompensateError::InvalidRequest("prompt text is empty".into()));
        }
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return Err(CompensateError::InvalidRequest(format!(
                "guidance scale must be positive, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// Settings a compensation service reports back for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceEcho {
    pub model_id: Option<String>,
    pub steps: Option<serde_json::Value>,
    pub strength: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Compensated {
    pub image: RgbImage,
    pub service: Option<ServiceEcho>,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    fn health_check(&self) -> Result<(), CompensateError> {
        Ok(())
    }

    fn compensate(&self, req: &CompensationRequest<'_>) -> Result<Compensated, CompensateError>;
}

/// Per-channel gain, rounded half-to-even and clamped to `[0, 255]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FallbackBackend;

impl FallbackBackend {
    pub fn apply(image: &RgbImage, family: HueFamily) -> RgbImage {
        let gains = match family {
            HueFamily::Cool => COOL_GAINS,
            HueFamily::Warm => WARM_GAINS,
        };
        let mut out = image.clone();
        for px in out.pixels_mut() {
            for (c, g) in px.0.iter_mut().zip(gains) {
                *c = (*c as f64 * g).round_ties_even().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

impl Backend for FallbackBackend {
    fn name(&self) -> &'static str {
        "fallback"
    }

    fn compensate(&self, req: &CompensationRequest<'_>) -> Result<Compensated, CompensateError> {
        Ok(Compensated {
            image: Self::apply(req.image, req.prompt.family),
            service: None,
        })
    }
}

/// Runs one request through `backend` and checks the size contract.
pub fn compensate(
    req: &CompensationRequest<'_>,
    backend: &dyn Backend,
) -> Result<Compensated, CompensateError> {
    req.validate()?;
    let out = backend.compensate(req)?;
    if out.image.dimensions() != req.image.dimensions() {
        return Err(CompensateError::DimensionMismatch {
            want_w: req.image.width(),
            want_h: req.image.height(),
            got_w: out.image.width(),
            got_h: out.image.height(),
        });
    }
    Ok(out)
}

pub const COOL_SEED_XOR: u64 = 1;
pub const WARM_SEED_XOR: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProvenance {
    pub source_id: String,
    pub cool_prompt: String,
    pub warm_prompt: String,
    pub prompt_seed: u64,
    pub cool_seed: u64,
    pub warm_seed: u64,
    pub guidance_scale: f64,
    pub backend: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub service: Option<ServiceEcho>,
}

#[derive(Debug, Clone)]
pub struct CompensatedPair {
    pub cool: RgbImage,
    pub warm: RgbImage,
    pub provenance: PairProvenance,
}

/// Picks prompts with `seed`, then renders the cool variant with `seed ^ 1`
/// and the warm one with `seed ^ 2`.
pub fn compensate_pair(
    source_id: &str,
    image: &RgbImage,
    catalog: &[HuePrompt],
    seed: u64,
    guidance_scale: f64,
    backend: &dyn Backend,
) -> Result<CompensatedPair, CompensateError> {
    let (cool_prompt, warm_prompt) = pick_prompts(catalog, seed)?;
    let cool_seed = seed ^ COOL_SEED_XOR;
    let warm_seed = seed ^ WARM_SEED_XOR;
    let cool = compensate(
        &CompensationRequest { image, prompt: cool_prompt.clone(), seed: cool_seed, guidance_scale },
        backend,
    )?;
    let warm = compensate(
        &CompensationRequest { image, prompt: warm_prompt.clone(), seed: warm_seed, guidance_scale },
        backend,
    )?;
    Ok(CompensatedPair {
        cool: cool.image,
        warm: warm.image,
        provenance: PairProvenance {
            source_id: source_id.to_string(),
            cool_prompt: cool_prompt.text,
            warm_prompt: warm_prompt.text,
            prompt_seed: seed,
            cool_seed,
            warm_seed,
            guidance_scale,
            backend: backend.name().to_string(),
            service: cool.service.or(warm.service),
        },
    })
}
