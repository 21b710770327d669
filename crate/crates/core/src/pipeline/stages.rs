use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;

use crate::compensator::{
    compensate_pair, default_catalog, Backend, FallbackBackend, HttpBackend, PairProvenance,
};
use crate::metrics::{self, ChannelHistogram, KdeCurve};
use crate::quantizer::{kmeans_partition, BinPartition, KMeansParams};
use crate::raster;
use crate::rng::{derive_seed, STREAM_VERSION};
use crate::sampler::{select_per_class, SelectionResult};
use crate::stitcher::{self, StitchStrategy};

use super::artifacts::*;
use super::config::{BackendConfig, PipelineConfig};
use super::{Dataset, PipelineError, Stage, StageFailure, Staging};

const TAG_QUANTIZE: u64 = 1;
const TAG_COMPENSATE: u64 = 2;
const TAG_STITCH: u64 = 3;
/// XOR applied to an image seed for the second cool/warm pair.
const SECOND_PAIR_XOR: u64 = 4;

fn read_config(stage: Stage, out: &Path) -> Result<PipelineConfig, PipelineError> {
    let cfg: PipelineConfig = read_stage_input(stage, &out.join(CONFIG_FILE))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Runs `work` over `jobs` in parallel blocks and hands results to `commit`
/// strictly in job order.
fn process_ordered<J, R, W, C>(
    pool: Option<&rayon::ThreadPool>,
    jobs: &[J],
    block: usize,
    work: W,
    mut commit: C,
) -> Result<(), StageFailure>
where
    J: Sync,
    R: Send,
    W: Fn(&J) -> Result<R, StageFailure> + Sync + Send,
    C: FnMut(R) -> Result<(), StageFailure>,
{
    for chunk in jobs.chunks(block.max(1)) {
        let run = || chunk.par_iter().map(&work).collect::<Result<Vec<R>, StageFailure>>();
        let results = match pool {
            Some(p) => p.install(run),
            None => run(),
        }?;
        for r in results {
            commit(r)?;
        }
    }
    Ok(())
}

fn empty_partition(class: &str, seed: u64) -> BinPartition {
    BinPartition {
        class_label: class.to_string(),
        bins: 0,
        members: vec![],
        assignment: vec![],
        centroids: vec![],
        inertia: 0.0,
        inertia_history: vec![],
        iterations: 0,
        seed,
    }
}

/// Clusters every class into bins and writes `config.json` plus one
/// `bins.<class>.json` per class.
pub fn quantize(
    dataset: &Dataset,
    config: &PipelineConfig,
    out: &Path,
) -> Result<Vec<BinPartition>, PipelineError> {
    const STAGE: Stage = Stage::Quantize;
    config.validate()?;
    let manifest = &dataset.manifest;
    let partitions = manifest
        .classes
        .par_iter()
        .enumerate()
        .map(|(ci, class)| -> Result<BinPartition, StageFailure> {
            let members = manifest.class_view(class)?;
            let seed = derive_seed(config.seed, &[TAG_QUANTIZE, ci as u64]);
            if members.is_empty() {
                return Ok(empty_partition(class, seed));
            }
            let params = KMeansParams {
                bins: config.effective_bins(),
                seed,
                max_iters: config.max_iters,
                tol: config.tol,
            };
            let features = dataset.rows_of(&members)?;
            Ok(kmeans_partition(&features, &params)?.labelled(class, members))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.at(STAGE))?;

    let staging = Staging::new(out).map_err(|e| e.at(STAGE))?;
    let write = || -> Result<(), StageFailure> {
        write_bytes(&staging.path().join(CONFIG_FILE), config.to_json().as_bytes())?;
        for p in &partitions {
            write_json(&staging.path().join(bins_file(&p.class_label)), p)?;
        }
        Ok(())
    };
    write().map_err(|e| e.at(STAGE))?;
    staging.commit().map_err(|e| e.at(STAGE))?;
    Ok(partitions)
}

/// Selects up to `ipc` samples per class from the quantize stage's bins.
pub fn sample(dataset: &Dataset, out: &Path) -> Result<Vec<SelectionArtifact>, PipelineError> {
    const STAGE: Stage = Stage::Sample;
    let config = read_config(STAGE, out)?;
    let manifest = &dataset.manifest;
    let partitions = manifest
        .classes
        .iter()
        .map(|c| read_stage_input::<BinPartition>(STAGE, &out.join(bins_file(c))))
        .collect::<Result<Vec<_>, _>>()?;

    let selections = manifest
        .classes
        .par_iter()
        .zip(&partitions)
        .map(|(class, partition)| -> Result<SelectionArtifact, StageFailure> {
            let members = manifest.class_view(class)?;
            if partition.class_label != *class || partition.members != members {
                return Err(StageFailure::Inconsistent(format!(
                    "bins for class {class:?} do not match the dataset"
                )));
            }
            let result = if members.is_empty() {
                SelectionResult {
                    class_label: class.clone(),
                    mode: config.mode,
                    per_bin_quota: vec![],
                    selected: vec![],
                }
            } else {
                let features = dataset.rows_of(&members)?;
                select_per_class(&features, partition, config.ipc, config.mode)?
            };
            Ok(SelectionArtifact {
                class: class.clone(),
                mode: result.mode,
                per_bin_quota: result.per_bin_quota,
                selected: result
                    .selected
                    .into_iter()
                    .map(|s| SelectedEntry {
                        id: manifest.samples[s.sample].id.clone(),
                        sample: s.sample,
                        bin: s.bin,
                        gain: s.gain,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.at(STAGE))?;

    let staging = Staging::new(out).map_err(|e| e.at(STAGE))?;
    for s in &selections {
        write_json(&staging.path().join(selection_file(&s.class)), s).map_err(|e| e.at(STAGE))?;
    }
    staging.commit().map_err(|e| e.at(STAGE))?;
    Ok(selections)
}

fn read_selections(
    stage: Stage,
    dataset: &Dataset,
    out: &Path,
) -> Result<Vec<SelectionArtifact>, PipelineError> {
    let selections = dataset
        .manifest
        .classes
        .iter()
        .map(|c| read_stage_input::<SelectionArtifact>(stage, &out.join(selection_file(c))))
        .collect::<Result<Vec<_>, _>>()?;
    for s in &selections {
        for e in &s.selected {
            let ok = dataset
                .manifest
                .samples
                .get(e.sample)
                .is_some_and(|r| r.id == e.id && r.class_label == s.class);
            if !ok {
                return Err(StageFailure::Inconsistent(format!(
                    "selection entry {:?} does not match the dataset",
                    e.id
                ))
                .at(stage));
            }
        }
    }
    Ok(selections)
}

/// Builds the backend named in the configuration.
pub fn backend_for(config: &PipelineConfig) -> Box<dyn Backend> {
    match &config.backend {
        BackendConfig::Fallback => Box::new(FallbackBackend),
        BackendConfig::Http { endpoint } => Box::new(HttpBackend::new(endpoint)),
    }
}

/// Compensates every selected image with the configured backend.
pub fn compensate(dataset: &Dataset, out: &Path) -> Result<CompensationArtifact, PipelineError> {
    let config = read_config(Stage::Compensate, out)?;
    let backend = backend_for(&config);
    compensate_with(dataset, out, backend.as_ref())
}

struct CompensateJob<'a> {
    class: &'a str,
    entry: &'a SelectedEntry,
}

/// Like [`compensate`] but with an explicit backend.
pub fn compensate_with(
    dataset: &Dataset,
    out: &Path,
    backend: &dyn Backend,
) -> Result<CompensationArtifact, PipelineError> {
    const STAGE: Stage = Stage::Compensate;
    let config = read_config(STAGE, out)?;
    let selections = read_selections(STAGE, dataset, out)?;
    backend.health_check().map_err(|e| StageFailure::from(e).at(STAGE))?;

    let jobs: Vec<CompensateJob> = selections
        .iter()
        .flat_map(|s| s.selected.iter().map(move |entry| CompensateJob { class: &s.class, entry }))
        .collect();
    let catalog = default_catalog();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_in_flight)
        .build()
        .map_err(|e| StageFailure::Inconsistent(format!("thread pool: {e}")).at(STAGE))?;

    let work = |job: &CompensateJob| -> Result<(CompensationEntry, Vec<RgbImage>), StageFailure> {
        let e = job.entry;
        let path = dataset.manifest.image_path(e.sample);
        let img = raster::load_rgb(&path).map_err(|err| StageFailure::image(&path, err))?;
        let image_seed = derive_seed(config.seed, &[TAG_COMPENSATE, e.sample as u64]);
        let mut pair_seeds = vec![image_seed];
        if config.variants == 4 {
            pair_seeds.push(image_seed ^ SECOND_PAIR_XOR);
        }
        let mut pairs: Vec<PairProvenance> = Vec::new();
        let mut images = Vec::new();
        let mut files = Vec::new();
        for (k, &seed) in pair_seeds.iter().enumerate() {
            let pair =
                compensate_pair(&e.id, &img, &catalog, seed, config.guidance_scale, backend)?;
            let suffix = if k == 0 { "" } else { "2" };
            files.push(compensated_file(job.class, &e.id, &format!("cool{suffix}")));
            files.push(compensated_file(job.class, &e.id, &format!("warm{suffix}")));
            images.push(pair.cool);
            images.push(pair.warm);
            pairs.push(pair.provenance);
        }
        let entry = CompensationEntry {
            class: job.class.to_string(),
            id: e.id.clone(),
            sample: e.sample,
            bin: e.bin,
            gain: e.gain,
            image_seed,
            pairs,
            files,
        };
        Ok((entry, images))
    };

    let staging = Staging::new(out).map_err(|e| e.at(STAGE))?;
    let mut entries = Vec::with_capacity(jobs.len());
    process_ordered(Some(&pool), &jobs, config.max_in_flight * 4, work, |(entry, images)| {
        for (rel, img) in entry.files.iter().zip(&images) {
            let path = join(staging.path(), rel);
            let png = raster::encode_png(img).map_err(|e| StageFailure::image(&path, e))?;
            write_bytes(&path, &png)?;
        }
        entries.push(entry);
        Ok(())
    })
    .map_err(|e| e.at(STAGE))?;

    let artifact = CompensationArtifact {
        backend: backend.name().to_string(),
        guidance_scale: config.guidance_scale,
        entries,
    };
    write_json(&staging.path().join(COMPENSATION_FILE), &artifact).map_err(|e| e.at(STAGE))?;
    // a fresh compensated/ tree replaces any earlier one
    if !staging.path().join(COMPENSATED_DIR).exists() {
        std::fs::create_dir_all(staging.path().join(COMPENSATED_DIR))
            .map_err(|e| StageFailure::io(staging.path(), e).at(STAGE))?;
    }
    staging.commit().map_err(|e| e.at(STAGE))?;
    Ok(artifact)
}

/// Which compensated variant fills each stitch slot.
pub fn stitch_sources(strategy: &StitchStrategy, available: usize) -> Vec<usize> {
    match strategy {
        StitchStrategy::Quarter4 if available >= 4 => vec![0, 1, 2, 3],
        StitchStrategy::Quarter4 => vec![0, 1, 0, 1],
        _ => vec![0, 1],
    }
}

/// Fuses each image's compensated variants and writes the condensed
/// dataset plus `manifest.json` (without metrics).
pub fn stitch(dataset: &Dataset, out: &Path) -> Result<CondensedManifest, PipelineError> {
    const STAGE: Stage = Stage::Stitch;
    let config = read_config(STAGE, out)?;
    let comp: CompensationArtifact = read_stage_input(STAGE, &out.join(COMPENSATION_FILE))?;

    let work = |entry: &CompensationEntry| -> Result<(CondensedImage, RgbImage), StageFailure> {
        let variants = entry
            .files
            .iter()
            .map(|rel| {
                let path = join(out, rel);
                raster::load_rgb(&path).map_err(|e| StageFailure::image(&path, e))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let sources = stitch_sources(&config.stitch, variants.len());
        let slots: Vec<&RgbImage> = sources.iter().map(|&i| &variants[i]).collect();
        let seed = derive_seed(config.seed, &[TAG_STITCH, entry.sample as u64]);
        let fused = stitcher::stitch(&slots, &config.stitch, seed)?;
        let record = CondensedImage {
            path: output_image_file(&entry.class, &entry.id),
            source_id: entry.id.clone(),
            class: entry.class.clone(),
            bin: entry.bin,
            gain: entry.gain,
            compensation: entry.pairs.clone(),
            stitch: config.stitch,
            stitch_seed: seed,
            stitch_sources: sources,
        };
        Ok((record, fused))
    };

    let staging = Staging::new(out).map_err(|e| e.at(STAGE))?;
    let mut images = Vec::with_capacity(comp.entries.len());
    process_ordered(None, &comp.entries, 64, work, |(record, fused)| {
        let path = join(staging.path(), &record.path);
        let png = raster::encode_png(&fused).map_err(|e| StageFailure::image(&path, e))?;
        write_bytes(&path, &png)?;
        images.push(record);
        Ok(())
    })
    .map_err(|e| e.at(STAGE))?;
    std::fs::create_dir_all(staging.path().join(IMAGES_DIR))
        .map_err(|e| StageFailure::io(staging.path(), e).at(STAGE))?;

    let manifest = CondensedManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        dataset: dataset.manifest.name.clone(),
        rng: RngInfo { generator: "splitmix64".into(), stream_version: STREAM_VERSION },
        config,
        classes: dataset.manifest.classes.clone(),
        images,
        metrics: None,
    };
    write_json(&staging.path().join(MANIFEST_FILE), &manifest).map_err(|e| e.at(STAGE))?;
    staging.commit().map_err(|e| e.at(STAGE))?;
    Ok(manifest)
}

/// Per-image colorfulness plus pooled channel histogram of a set of files.
fn scan_images(paths: &[std::path::PathBuf]) -> Result<(Vec<f64>, ChannelHistogram), StageFailure> {
    let mut scores = Vec::with_capacity(paths.len());
    let mut hist = ChannelHistogram::default();
    process_ordered(
        None,
        paths,
        256,
        |path| {
            let img = raster::load_rgb(path).map_err(|e| StageFailure::image(path, e))?;
            let score = metrics::colorfulness(&img)?.score;
            let mut h = ChannelHistogram::default();
            h.add(&img);
            Ok((score, h))
        },
        |(score, h)| {
            scores.push(score);
            for c in 0..3 {
                for v in 0..256 {
                    hist.counts[c][v] += h.counts[c][v];
                }
            }
            Ok(())
        },
    )?;
    Ok((scores, hist))
}

fn dataset_metrics(
    paths: &[std::path::PathBuf],
) -> Result<(DatasetMetrics, [KdeCurve; 3]), StageFailure> {
    let (scores, hist) = scan_images(paths)?;
    let colorfulness = metrics::summarize(&scores)?;
    let curves = metrics::kde_from_histogram(&hist, None)?;
    let kde_bandwidth = [curves[0].bandwidth, curves[1].bandwidth, curves[2].bandwidth];
    Ok((DatasetMetrics { colorfulness, kde_bandwidth }, curves))
}

fn kde_csv(sets: &[(&str, &[KdeCurve; 3])]) -> String {
    let mut csv = String::from("grid");
    for (name, _) in sets {
        for ch in ["r", "g", "b"] {
            let _ = write!(csv, ",{name}_{ch}");
        }
    }
    csv.push('\n');
    let grid = &sets[0].1[0].grid;
    for (i, x) in grid.iter().enumerate() {
        let _ = write!(csv, "{x:.8e}");
        for (_, curves) in sets {
            for c in curves.iter() {
                let _ = write!(csv, ",{:.8e}", c.density[i]);
            }
        }
        csv.push('\n');
    }
    csv
}

/// Compares the original dataset, the uncompensated selection and the
/// condensed output; writes `metrics.json`, `kde.csv` and fills the metric
/// summary into `manifest.json`.
pub fn metrics(dataset: &Dataset, out: &Path) -> Result<CondensedManifest, PipelineError> {
    const STAGE: Stage = Stage::Metrics;
    let mut manifest: CondensedManifest = read_stage_input(STAGE, &out.join(MANIFEST_FILE))?;
    let by_id: HashMap<&str, usize> = dataset
        .manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();

    let original: Vec<_> = (0..dataset.manifest.samples.len())
        .map(|i| dataset.manifest.image_path(i))
        .collect();
    let selected = manifest
        .images
        .iter()
        .map(|img| {
            by_id
                .get(img.source_id.as_str())
                .map(|&i| dataset.manifest.image_path(i))
                .ok_or_else(|| {
                    StageFailure::Inconsistent(format!("unknown source id {:?}", img.source_id))
                })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.at(STAGE))?;
    let condensed: Vec<_> = manifest.images.iter().map(|img| join(out, &img.path)).collect();

    let (orig_m, orig_k) = dataset_metrics(&original).map_err(|e| e.at(STAGE))?;
    let (sel_m, sel_k) = dataset_metrics(&selected).map_err(|e| e.at(STAGE))?;
    let (cond_m, cond_k) = dataset_metrics(&condensed).map_err(|e| e.at(STAGE))?;
    let report = |a, b| metrics::homogenization_report(a, b).map_err(|e| StageFailure::from(e).at(STAGE));
    let artifact = MetricsArtifact {
        condensed_vs_original: report(&orig_k, &cond_k)?,
        selected_vs_original: report(&orig_k, &sel_k)?,
        original: orig_m,
        selected: sel_m,
        condensed: cond_m,
    };
    manifest.metrics = Some(MetricsSummary {
        original_colorfulness: artifact.original.colorfulness.mean,
        selected_colorfulness: artifact.selected.colorfulness.mean,
        condensed_colorfulness: artifact.condensed.colorfulness.mean,
        condensed_vs_original_l1: artifact.condensed_vs_original.mean_l1,
        selected_vs_original_l1: artifact.selected_vs_original.mean_l1,
    });

    let csv = kde_csv(&[("original", &orig_k), ("selected", &sel_k), ("condensed", &cond_k)]);
    let staging = Staging::new(out).map_err(|e| e.at(STAGE))?;
    let write = || -> Result<(), StageFailure> {
        write_json(&staging.path().join(METRICS_FILE), &artifact)?;
        write_bytes(&staging.path().join(KDE_FILE), csv.as_bytes())?;
        write_json(&staging.path().join(MANIFEST_FILE), &manifest)
    };
    write().map_err(|e| e.at(STAGE))?;
    staging.commit().map_err(|e| e.at(STAGE))?;
    Ok(manifest)
}
