//! `dc3`: condense an image dataset, either in one `run` or stage by stage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dc3_core::pipeline::{self, BackendConfig, ConfigLayer, Dataset, PipelineConfig, PipelineError};
use dc3_core::synthetic::{self, SynthSpec};
use dc3_core::{SelectionMode, StitchStrategy};

#[derive(Parser)]
#[command(name = "dc3", version, about = "Dataset condensation with hue compensation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and publish the condensed dataset at --out.
    Run {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Cluster each class into bins; writes the resolved config.
    Quantize {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pick samples from the bins.
    Sample(IoArgs),
    /// Render cool and warm variants of the picked samples.
    Compensate(IoArgs),
    /// Fuse the variants into the condensed images.
    Stitch(IoArgs),
    /// Colorfulness and channel-density statistics.
    Metrics(IoArgs),
    /// Write a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        width: u32,
        #[arg(long, default_value_t = 16)]
        height: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian sub-clusters per class.
        #[arg(long, default_value_t = 1)]
        modes: usize,
    },
}

#[derive(Args)]
struct IoArgs {
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Fallback,
    Http,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON file with any subset of the configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ipc: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<SelectionMode>,
    /// half2, quarter4, pixels[:F] or grid:N
    #[arg(long)]
    stitch: Option<StitchStrategy>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_in_flight: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let file = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
                ConfigLayer::from_json(&text)?
            }
            None => ConfigLayer::default(),
        };
        let backend = match (self.backend, &self.endpoint) {
            (Some(BackendKind::Fallback), Some(_)) => {
                return Err(PipelineError::ConfigInvalid(
                    "--endpoint requires the http backend".into(),
                )
                .into())
            }
            (Some(BackendKind::Fallback), None) => Some(BackendConfig::Fallback),
            (Some(BackendKind::Http) | None, Some(url)) => {
                Some(BackendConfig::Http { endpoint: url.clone() })
            }
            (Some(BackendKind::Http), None) => match &file.backend {
                Some(b @ BackendConfig::Http { .. }) => Some(b.clone()),
                _ => {
                    return Err(PipelineError::ConfigInvalid(
                        "the http backend needs --endpoint".into(),
                    )
                    .into())
                }
            },
            (None, None) => None,
        };
        let flags = ConfigLayer {
            ipc: self.ipc,
            bins: self.bins,
            seed: self.seed,
            mode: self.mode,
            stitch: self.stitch,
            backend,
            guidance_scale: self.guidance_scale,
            variants: self.variants,
            max_iters: self.max_iters,
            tol: self.tol,
            max_in_flight: self.max_in_flight,
        };
        Ok(flags.over(file).resolve()?)
    }
}

fn open(dir: &Path) -> Result<Dataset> {
    Ok(Dataset::open(dir)?)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { io, config } => {
            let cfg = config.resolve()?;
            let manifest = pipeline::run(&cfg, &io.dataset, &io.out)?;
            for (class, n) in manifest.per_class_counts() {
                info!("{class}: {n} images");
            }
            if let Some(m) = &manifest.metrics {
                println!(
                    "condensed {} images; colorfulness {:.3} -> {:.3}; density L1 {:.4}",
                    manifest.images.len(),
                    m.original_colorfulness,
                    m.condensed_colorfulness,
                    m.condensed_vs_original_l1
                );
            }
        }
        Command::Quantize { io, config } => {
            let cfg = config.resolve()?;
            let ds = open(&io.dataset)?;
            let parts = pipeline::quantize(&ds, &cfg, &io.out)?;
            for p in parts {
                info!("{}: {} bins, inertia {:.4}", p.class_label, p.bins, p.inertia);
            }
        }
        Command::Sample(io) => {
            let ds = open(&io.dataset)?;
            for s in pipeline::sample(&ds, &io.out)? {
                info!("{}: {} selected", s.class, s.selected.len());
            }
        }
        Command::Compensate(io) => {
            let ds = open(&io.dataset)?;
            let artifact = pipeline::compensate(&ds, &io.out)?;
            info!("{} images compensated with {}", artifact.entries.len(), artifact.backend);
        }
        Command::Stitch(io) => {
            let ds = open(&io.dataset)?;
            let manifest = pipeline::stitch(&ds, &io.out)?;
            info!("{} images stitched", manifest.images.len());
        }
        Command::Metrics(io) => {
            let ds = open(&io.dataset)?;
            let manifest = pipeline::metrics(&ds, &io.out)?;
            if let Some(m) = manifest.metrics {
                println!(
                    "colorfulness original {:.3} selected {:.3} condensed {:.3}; density L1 {:.4}",
                    m.original_colorfulness,
                    m.selected_colorfulness,
                    m.condensed_colorfulness,
                    m.condensed_vs_original_l1
                );
            }
        }
        Command::Synth { out, classes, per_class, dim, width, height, seed, modes } => {
            if classes == 0 || per_class == 0 || dim == 0 || width == 0 || height == 0 || modes == 0 {
                bail!("synthetic dataset dimensions must be positive");
            }
            let spec = SynthSpec { classes, per_class, dim, width, height, seed, modes };
            synthetic::write_dataset(&spec, &out)
                .with_context(|| format!("writing dataset to {}", out.display()))?;
        }
    }
    Ok(())
}

/// Stage tag for diagnostics, plus the exit code.
fn classify(err: &anyhow::Error) -> (String, u8) {
    match err.downcast_ref::<PipelineError>() {
        Some(PipelineError::ConfigInvalid(_)) => ("config".into(), 2),
        Some(PipelineError::OutputExists(_)) => ("output".into(), 3),
        Some(e) => (e.stage().map(|s| s.to_string()).unwrap_or_default(), 1),
        None => ("dc3".into(), 1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (tag, code) = classify(&err);
            let mut shown = match err.downcast_ref::<PipelineError>() {
                Some(PipelineError::Stage { source, .. }) => source.to_string(),
                _ => err.to_string(),
            };
            eprintln!("error[{tag}]: {shown}");
            for cause in err.chain().skip(1) {
                let text = cause.to_string();
                if !shown.contains(&text) {
                    eprintln!("  caused by: {text}");
                    shown = text;
                }
            }
            ExitCode::from(code)
        }
    }
}
