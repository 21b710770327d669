//! End-to-end condensation: load → quantize → sample → compensate → stitch →
//! metrics.
//!
//! Each stage reads the artifacts of the previous one from the output
//! directory and writes its own through a staging directory that is renamed
//! into place only when the stage succeeds. [`run`] chains the five stages
//! inside a private temporary directory and renames it to the requested
//! output at the very end, so an aborted run leaves nothing behind.

pub mod artifacts;
pub mod config;
mod stages;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::ImageError;
use thiserror::Error;

use crate::catalog::{self, CatalogError, DatasetManifest, FeatureMatrix};
use crate::compensator::CompensateError;
use crate::metrics::MetricsError;
use crate::quantizer::QuantizeError;
use crate::sampler::SampleError;
use crate::stitcher::StitchError;

pub use artifacts::{
    CompensationArtifact, CondensedImage, CondensedManifest, MetricsArtifact, MetricsSummary,
    SelectionArtifact,
};
pub use config::{BackendConfig, ConfigLayer, PipelineConfig};
pub use stages::{compensate, compensate_with, metrics, quantize, sample, stitch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Quantize,
    Sample,
    Compensate,
    Stitch,
    Metrics,
    Commit,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Load => "load",
            Stage::Quantize => "quantize",
            Stage::Sample => "sample",
            Stage::Compensate => "compensate",
            Stage::Stitch => "stitch",
            Stage::Metrics => "metrics",
            Stage::Commit => "commit",
        })
    }
}

#[derive(Debug, Error)]
pub enum StageFailure {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Compensate(#[from] CompensateError),
    #[error(transparent)]
    Stitch(#[from] StitchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("json: {0}")]
    Json(String),
    #[error("{0}")]
    Inconsistent(String),
}

impl StageFailure {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        StageFailure::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn image(path: &Path, source: ImageError) -> Self {
        StageFailure::Image { path: path.to_path_buf(), source }
    }

    pub(crate) fn at(self, stage: Stage) -> PipelineError {
        PipelineError::Stage { stage, source: self }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("stage {stage} is missing its input {}", path.display())]
    MissingStageInput { stage: Stage, path: PathBuf },
    #[error("output directory {} already exists and is not empty", .0.display())]
    OutputExists(PathBuf),
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageFailure,
    },
}

impl PipelineError {
    /// The stage an error is attributed to, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::ConfigInvalid(_) | PipelineError::OutputExists(_) => None,
            PipelineError::MissingStageInput { stage, .. } | PipelineError::Stage { stage, .. } => {
                Some(*stage)
            }
        }
    }
}

/// A loaded and validated input dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub features: FeatureMatrix,
}

impl Dataset {
    /// Loads `dir/manifest.json` and its feature file, and checks that all
    /// images of a class share one size.
    pub fn open(dir: &Path) -> Result<Self, PipelineError> {
        let fail = |e: StageFailure| e.at(Stage::Load);
        let manifest =
            catalog::load_manifest(&dir.join("manifest.json")).map_err(|e| fail(e.into()))?;
        let features =
            catalog::load_features(&manifest.feature_path()).map_err(|e| fail(e.into()))?;
        manifest.validate(features.count()).map_err(|e| fail(e.into()))?;

        for class in &manifest.classes {
            let mut size: Option<(u32, u32, &str)> = None;
            for i in manifest.class_view(class).map_err(|e| fail(e.into()))? {
                let path = manifest.image_path(i);
                let dims = image::image_dimensions(&path)
                    .map_err(|e| fail(StageFailure::image(&path, e)))?;
                let id = manifest.samples[i].id.as_str();
                match size {
                    None => size = Some((dims.0, dims.1, id)),
                    Some((w, h, first)) if (w, h) != dims => {
                        return Err(fail(StageFailure::Inconsistent(format!(
                            "class {class:?}: image {id:?} is {}x{} but {first:?} is {w}x{h}",
                            dims.0, dims.1
                        ))))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { manifest, features })
    }

    /// Feature rows of the given samples, in order.
    pub fn rows_of(&self, samples: &[usize]) -> Result<FeatureMatrix, CatalogError> {
        let rows: Vec<usize> =
            samples.iter().map(|&i| self.manifest.samples[i].feature_row).collect();
        self.features.select_rows(&rows)
    }
}

/// Writes into a hidden directory under `target`, moving the entries into
/// `target` on [`Staging::commit`]. Dropping it uncommitted discards
/// everything.
pub(crate) struct Staging {
    dir: tempfile::TempDir,
    target: PathBuf,
}

impl Staging {
    pub(crate) fn new(target: &Path) -> Result<Self, StageFailure> {
        fs::create_dir_all(target).map_err(|e| StageFailure::io(target, e))?;
        let dir = tempfile::Builder::new()
            .prefix(".staging-")
            .tempdir_in(target)
            .map_err(|e| StageFailure::io(target, e))?;
        Ok(Self { dir, target: target.to_path_buf() })
    }

    pub(crate) fn path(&self) -> &Path {
        self.dir.path()
    }

    pub(crate) fn commit(self) -> Result<(), StageFailure> {
        let mut entries: Vec<PathBuf> = fs::read_dir(self.dir.path())
            .map_err(|e| StageFailure::io(self.dir.path(), e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(|e| StageFailure::io(self.dir.path(), e))?;
        entries.sort();
        for src in entries {
            let dest = self.target.join(src.file_name().expect("entry has a name"));
            if dest.is_dir() {
                fs::remove_dir_all(&dest).map_err(|e| StageFailure::io(&dest, e))?;
            }
            fs::rename(&src, &dest).map_err(|e| StageFailure::io(&dest, e))?;
        }
        Ok(())
    }
}

fn dir_is_empty(dir: &Path) -> io::Result<bool> {
    Ok(fs::read_dir(dir)?.next().is_none())
}

/// Runs every stage and publishes the result at `out_dir`.
///
/// `out_dir` must not exist or be empty. On error nothing is written there.
pub fn run(
    config: &PipelineConfig,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<CondensedManifest, PipelineError> {
    config.validate()?;
    let commit_err = |p: &Path, e: io::Error| StageFailure::io(p, e).at(Stage::Commit);
    if out_dir.exists() && !dir_is_empty(out_dir).map_err(|e| commit_err(out_dir, e))? {
        return Err(PipelineError::OutputExists(out_dir.to_path_buf()));
    }
    let dataset = Dataset::open(dataset_dir)?;

    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| commit_err(&parent, e))?;
    let work = tempfile::Builder::new()
        .prefix(".dc3-run-")
        .tempdir_in(&parent)
        .map_err(|e| commit_err(&parent, e))?;

    quantize(&dataset, config, work.path())?;
    sample(&dataset, work.path())?;
    compensate(&dataset, work.path())?;
    stitch(&dataset, work.path())?;
    let manifest = metrics(&dataset, work.path())?;

    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(work.path(), fs::Permissions::from_mode(0o755))
            .map_err(|e| commit_err(work.path(), e))?;
    }
    if out_dir.exists() {
        fs::remove_dir(out_dir).map_err(|e| commit_err(out_dir, e))?;
    }
    let kept = work.keep();
    fs::rename(&kept, out_dir).map_err(|e| {
        let _ = fs::remove_dir_all(&kept);
        commit_err(out_dir, e)
    })?;
    Ok(manifest)
}

/// Reads the condensed manifest of a finished (or stitched) output directory.
pub fn load_condensed(out_dir: &Path) -> Result<CondensedManifest, PipelineError> {
    artifacts::read_stage_input(Stage::Metrics, &out_dir.join(artifacts::MANIFEST_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{write_dataset, SynthSpec};

    fn dataset(classes: usize, per_class: usize) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { classes, per_class, width: 8, height: 6, ..Default::default() };
        write_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn budget_below_bins_uses_one_bin_per_sample() {
        let (_d, ds) = dataset(1, 6);
        let out = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::new(2);
        cfg.bins = 5;
        let parts = quantize(&ds, &cfg, out.path()).unwrap();
        assert_eq!(parts[0].bins, 2);
        let sel = sample(&ds, out.path()).unwrap();
        assert_eq!(sel[0].per_bin_quota, vec![1, 1]);
        let bins: Vec<usize> = sel[0].selected.iter().map(|e| e.bin).collect();
        assert_eq!(bins.len(), 2);
        assert_ne!(bins[0], bins[1]);
    }

    #[test]
    fn stages_require_their_inputs() {
        let (_d, ds) = dataset(1, 4);
        let out = tempfile::tempdir().unwrap();
        for r in [
            sample(&ds, out.path()).map(|_| ()),
            compensate(&ds, out.path()).map(|_| ()),
            stitch(&ds, out.path()).map(|_| ()),
            metrics(&ds, out.path()).map(|_| ()),
        ] {
            assert!(matches!(r, Err(PipelineError::MissingStageInput { .. })), "{r:?}");
        }
    }

    #[test]
    fn run_writes_manifest_with_metrics() {
        let (d, _) = dataset(2, 7);
        let ds_dir = d.path();
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("out");
        let mut cfg = PipelineConfig::new(3);
        cfg.bins = 2;
        let m = run(&cfg, ds_dir, &out).unwrap();
        assert_eq!(m.per_class_counts(), vec![("c0".into(), 3), ("c1".into(), 3)]);
        assert!(m.metrics.is_some());
        for img in &m.images {
            assert!(artifacts::join(&out, &img.path).is_file());
        }
        assert_eq!(load_condensed(&out).unwrap(), m);
        let leftovers: Vec<_> = fs::read_dir(root.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
        assert!(matches!(run(&cfg, ds_dir, &out), Err(PipelineError::OutputExists(_))));
    }

    #[test]
    fn quarter4_with_four_variants_uses_each_once() {
        let (d, _) = dataset(1, 3);
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("out");
        let mut cfg = PipelineConfig::new(1);
        cfg.variants = 4;
        cfg.stitch = crate::stitcher::StitchStrategy::Quarter4;
        let m = run(&cfg, d.path(), &out).unwrap();
        assert_eq!(m.images[0].stitch_sources, vec![0, 1, 2, 3]);
        assert_eq!(m.images[0].compensation.len(), 2);
    }

    #[test]
    fn mismatched_image_sizes_rejected() {
        let (d, ds) = dataset(1, 3);
        let path = ds.manifest.image_path(1);
        crate::raster::save_png(&path, &image::RgbImage::new(5, 5)).unwrap();
        let err = Dataset::open(d.path()).unwrap_err();
        assert_eq!(err.stage(), Some(Stage::Load));
    }
}
