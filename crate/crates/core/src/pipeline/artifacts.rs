//! On-disk artifacts written by each stage.
//!
//! ```text
//! out/
//!   config.json                 resolved PipelineConfig
//!   bins.<class>.json           quantize
//!   selection.<class>.json      sample
//!   compensated/<class>/<id>.{cool,warm,cool2,warm2}.png
//!   compensation.json           compensate
//!   images/<class>/<id>.png
//!   manifest.json               stitch (metrics filled in by the metrics stage)
//!   metrics.json, kde.csv       metrics
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compensator::PairProvenance;
use crate::metrics::{DatasetColorfulness, HomogenizationReport};
use crate::sampler::SelectionMode;
use crate::stitcher::StitchStrategy;

use super::config::PipelineConfig;
use super::{Stage, StageFailure};

pub const CONFIG_FILE: &str = "config.json";
pub const COMPENSATION_FILE: &str = "compensation.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const KDE_FILE: &str = "kde.csv";
pub const COMPENSATED_DIR: &str = "compensated";
pub const IMAGES_DIR: &str = "images";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Escapes a class label or sample id for use as a file name component.
/// Alphanumerics, `-` and `_` pass through; everything else becomes `%XX`.
pub fn file_component(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for b in raw.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn bins_file(class: &str) -> String {
    format!("bins.{}.json", file_component(class))
}

pub fn selection_file(class: &str) -> String {
    format!("selection.{}.json", file_component(class))
}

pub fn compensated_file(class: &str, id: &str, variant: &str) -> String {
    format!("{COMPENSATED_DIR}/{}/{}.{variant}.png", file_component(class), file_component(id))
}

pub fn output_image_file(class: &str, id: &str) -> String {
    format!("{IMAGES_DIR}/{}/{}.png", file_component(class), file_component(id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedEntry {
    pub id: String,
    pub sample: usize,
    pub bin: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionArtifact {
    pub class: String,
    pub mode: SelectionMode,
    pub per_bin_quota: Vec<usize>,
    pub selected: Vec<SelectedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationEntry {
    pub class: String,
    pub id: String,
    pub sample: usize,
    pub bin: usize,
    pub gain: f64,
    pub image_seed: u64,
    pub pairs: Vec<PairProvenance>,
    /// Relative paths, ordered cool, warm[, cool2, warm2].
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationArtifact {
    pub backend: String,
    pub guidance_scale: f64,
    pub entries: Vec<CompensationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngInfo {
    pub generator: String,
    pub stream_version: u32,
}

/// One image of the condensed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedImage {
    pub path: String,
    pub source_id: String,
    pub class: String,
    pub bin: usize,
    pub gain: f64,
    pub compensation: Vec<PairProvenance>,
    pub stitch: StitchStrategy,
    pub stitch_seed: u64,
    /// Variant file indices fed to the stitcher, in slot order.
    pub stitch_sources: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub original_colorfulness: f64,
    pub selected_colorfulness: f64,
    pub condensed_colorfulness: f64,
    pub condensed_vs_original_l1: f64,
    pub selected_vs_original_l1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedManifest {
    pub format_version: u32,
    pub dataset: String,
    pub rng: RngInfo,
    pub config: PipelineConfig,
    pub classes: Vec<String>,
    pub images: Vec<CondensedImage>,
    pub metrics: Option<MetricsSummary>,
}

impl CondensedManifest {
    pub fn per_class_counts(&self) -> Vec<(String, usize)> {
        self.classes
            .iter()
            .map(|c| (c.clone(), self.images.iter().filter(|i| &i.class == c).count()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub colorfulness: DatasetColorfulness,
    pub kde_bandwidth: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub original: DatasetMetrics,
    pub selected: DatasetMetrics,
    pub condensed: DatasetMetrics,
    pub condensed_vs_original: HomogenizationReport,
    pub selected_vs_original: HomogenizationReport,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageFailure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| StageFailure::Json(e.to_string()))?;
    write_bytes(path, format!("{text}\n").as_bytes())
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), StageFailure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StageFailure::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| StageFailure::io(path, e))
}

/// Reads a JSON artifact another stage should have produced.
pub(crate) fn read_stage_input<T: DeserializeOwned>(
    stage: Stage,
    path: &Path,
) -> Result<T, super::PipelineError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(super::PipelineError::MissingStageInput {
                stage,
                path: path.to_path_buf(),
            })
        }
        Err(e) => return Err(StageFailure::io(path, e).at(stage)),
    };
    serde_json::from_str(&text).map_err(|e| {
        StageFailure::Json(format!("{}: {e}", path.display())).at(stage)
    })
}

pub(crate) fn join(root: &Path, rel: &str) -> PathBuf {
    rel.split('/').fold(root.to_path_buf(), |p, part| p.join(part))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_components_are_injective_and_safe() {
        assert_eq!(file_component("dog"), "dog");
        assert_eq!(file_component("golden retriever"), "golden%20retriever");
        assert_eq!(file_component("a/b"), "a%2Fb");
        assert_eq!(file_component("a.b"), "a%2Eb");
        assert_ne!(file_component("a%20b"), file_component("a b"));
        assert_eq!(bins_file("n0144"), "bins.n0144.json");
    }
}
