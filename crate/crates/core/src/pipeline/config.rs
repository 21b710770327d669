use serde::{Deserialize, Serialize};

use crate::compensator::DEFAULT_GUIDANCE_SCALE;
use crate::quantizer::{DEFAULT_BINS, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::sampler::SelectionMode;
use crate::stitcher::StitchStrategy;

use super::PipelineError;

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    #[default]
    Fallback,
    Http { endpoint: String },
}

/// Fully resolved run configuration. Serialized verbatim into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Images per class.
    pub ipc: usize,
    pub bins: usize,
    pub seed: u64,
    pub mode: SelectionMode,
    pub stitch: StitchStrategy,
    pub backend: BackendConfig,
    pub guidance_scale: f64,
    /// Compensated variants per image: one cool/warm pair, or two.
    pub variants: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub max_in_flight: usize,
}

impl PipelineConfig {
    pub fn new(ipc: usize) -> Self {
        Self {
            ipc,
            bins: DEFAULT_BINS,
            seed: 0,
            mode: SelectionMode::Static,
            stitch: StitchStrategy::Half2,
            backend: BackendConfig::Fallback,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            variants: 2,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::ConfigInvalid(m));
        if self.ipc == 0 {
            return bad("ipc must be positive".into());
        }
        if self.bins == 0 {
            return bad("bins must be positive".into());
        }
        if self.variants != 2 && self.variants != 4 {
            return bad(format!("variants must be 2 or 4, got {}", self.variants));
        }
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return bad(format!("guidance scale must be positive, got {}", self.guidance_scale));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive".into());
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return bad(format!("tol must be nonnegative, got {}", self.tol));
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive".into());
        }
        if let BackendConfig::Http { endpoint } = &self.backend {
            if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
                return bad(format!("endpoint {endpoint:?} is not an http(s) URL"));
            }
        }
        self.stitch
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))
    }

    /// Bin count actually used: a budget no larger than the bin count takes
    /// one sample from each of `ipc` bins.
    pub fn effective_bins(&self) -> usize {
        if self.ipc <= self.bins {
            self.ipc
        } else {
            self.bins
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// A partially specified configuration, as read from a config file or
/// assembled from command-line flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub ipc: Option<usize>,
    pub bins: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<SelectionMode>,
    pub stitch: Option<StitchStrategy>,
    pub backend: Option<BackendConfig>,
    pub guidance_scale: Option<f64>,
    pub variants: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub max_in_flight: Option<usize>,
}

impl ConfigLayer {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::ConfigInvalid(format!("config file: {e}")))
    }

    /// Fields set in `self` win over those in `lower`.
    pub fn over(self, lower: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            ipc: self.ipc.or(lower.ipc),
            bins: self.bins.or(lower.bins),
            seed: self.seed.or(lower.seed),
            mode: self.mode.or(lower.mode),
            stitch: self.stitch.or(lower.stitch),
            backend: self.backend.or(lower.backend),
            guidance_scale: self.guidance_scale.or(lower.guidance_scale),
            variants: self.variants.or(lower.variants),
            max_iters: self.max_iters.or(lower.max_iters),
            tol: self.tol.or(lower.tol),
            max_in_flight: self.max_in_flight.or(lower.max_in_flight),
        }
    }

    /// Fills unset fields with defaults and validates. `ipc` has no default.
    pub fn resolve(self) -> Result<PipelineConfig, PipelineError> {
        let ipc = self
            .ipc
            .ok_or_else(|| PipelineError::ConfigInvalid("ipc is required".into()))?;
        let d = PipelineConfig::new(ipc);
        let cfg = PipelineConfig {
            ipc,
            bins: self.bins.unwrap_or(d.bins),
            seed: self.seed.unwrap_or(d.seed),
            mode: self.mode.unwrap_or(d.mode),
            stitch: self.stitch.unwrap_or(d.stitch),
            backend: self.backend.unwrap_or(d.backend),
            guidance_scale: self.guidance_scale.unwrap_or(d.guidance_scale),
            variants: self.variants.unwrap_or(d.variants),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            tol: self.tol.unwrap_or(d.tol),
            max_in_flight: self.max_in_flight.unwrap_or(d.max_in_flight),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
