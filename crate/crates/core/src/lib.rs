//! Dataset condensation: per-class k-means bins, submodular sample selection,
//! hue compensation of the selected images, crop-and-stitch fusion, and
//! color-diversity metrics.
//!
//! The [`pipeline`] module ties the stages together; every other module is
//! usable on its own.

pub mod catalog;
pub mod compensator;
pub mod metrics;
pub mod pipeline;
pub mod quantizer;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod stitcher;
pub mod synthetic;

pub use catalog::{DatasetManifest, FeatureMatrix, SampleRecord};
pub use compensator::{Backend, FallbackBackend, HttpBackend, HueFamily, HuePrompt};
pub use quantizer::{BinPartition, KMeansParams};
pub use sampler::{SelectionMode, SelectionResult};
pub use pipeline::{run, Dataset, PipelineConfig, PipelineError, Stage};
pub use stitcher::StitchStrategy;
