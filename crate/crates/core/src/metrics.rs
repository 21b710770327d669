//! Color-diversity statistics.
//!
//! Colorfulness follows Hasler & Süsstrunk on 8-bit values: with
//! `rg = |R − G|` and `yb = ½(R + G) − B` (signed) per pixel,
//! `score = √(σ_rg² + σ_yb²) + 0.3·√(μ_rg² + μ_yb²)` using population
//! statistics. Color distributions are compared through Gaussian KDE curves of
//! normalized channel values on a fixed 256-point grid over `[0, 1]`.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const KDE_GRID_POINTS: usize = 256;
/// Bandwidth floor: one grid step keeps the trapezoid rule accurate even for
/// a single repeated value.
pub const MIN_BANDWIDTH: f64 = 1.0 / (KDE_GRID_POINTS as f64 - 1.0);

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("image has no pixels")]
    EmptyImage,
    #[error("dataset has no images")]
    EmptyDataset,
    #[error("kde curves were evaluated on different grids")]
    GridMismatch,
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorfulnessScore {
    pub score: f64,
    pub sigma_rg: f64,
    pub sigma_yb: f64,
    pub mu_rg: f64,
    pub mu_yb: f64,
    pub sigma_root: f64,
    pub mu_root: f64,
}

pub fn colorfulness(image: &RgbImage) -> Result<ColorfulnessScore, MetricsError> {
    let n = image.pixels().len();
    if n == 0 {
        return Err(MetricsError::EmptyImage);
    }
    let opponent = |p: &image::Rgb<u8>| {
        let [r, g, b] = p.0.map(f64::from);
        ((r - g).abs(), 0.5 * (r + g) - b)
    };
    let (mut sum_rg, mut sum_yb) = (0.0, 0.0);
    for p in image.pixels() {
        let (rg, yb) = opponent(p);
        sum_rg += rg;
        sum_yb += yb;
    }
    let mu_rg = sum_rg / n as f64;
    let mu_yb = sum_yb / n as f64;
    let (mut ss_rg, mut ss_yb) = (0.0, 0.0);
    for p in image.pixels() {
        let (rg, yb) = opponent(p);
        ss_rg += (rg - mu_rg).powi(2);
        ss_yb += (yb - mu_yb).powi(2);
    }
    let sigma_rg = (ss_rg / n as f64).sqrt();
    let sigma_yb = (ss_yb / n as f64).sqrt();
    let sigma_root = sigma_rg.hypot(sigma_yb);
    let mu_root = mu_rg.hypot(mu_yb);
    Ok(ColorfulnessScore {
        score: sigma_root + 0.3 * mu_root,
        sigma_rg,
        sigma_yb,
        mu_rg,
        mu_yb,
        sigma_root,
        mu_root,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetColorfulness {
    pub images: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean of per-image scores over the dataset.
pub fn dataset_colorfulness<'a, I>(images: I) -> Result<DatasetColorfulness, MetricsError>
where
    I: IntoIterator<Item = &'a RgbImage>,
{
    let scores = images
        .into_iter()
        .map(|img| colorfulness(img).map(|s| s.score))
        .collect::<Result<Vec<_>, _>>()?;
    summarize(&scores)
}

/// Aggregates per-image scores, summing in the given order.
pub fn summarize(scores: &[f64]) -> Result<DatasetColorfulness, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let (mut sum, mut min, mut max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for &s in scores {
        sum += s;
        min = min.min(s);
        max = max.max(s);
    }
    Ok(DatasetColorfulness { images: scores.len(), mean: sum / scores.len() as f64, min, max })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub channel: Channel,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl KdeCurve {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

pub fn kde_grid() -> Vec<f64> {
    (0..KDE_GRID_POINTS)
        .map(|i| i as f64 / (KDE_GRID_POINTS - 1) as f64)
        .collect()
}

/// Per-channel counts of each 8-bit value.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelHistogram {
    pub counts: [[u64; 256]; 3],
}

impl Default for ChannelHistogram {
    fn default() -> Self {
        Self { counts: [[0; 256]; 3] }
    }
}

impl ChannelHistogram {
    pub fn add(&mut self, image: &RgbImage) {
        for p in image.pixels() {
            for c in 0..3 {
                self.counts[c][p.0[c] as usize] += 1;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts[0].iter().sum()
    }
}

/// Silverman's rule `0.9·min(σ, IQR/1.34)·n^(−1/5)` on normalized values,
/// floored at [`MIN_BANDWIDTH`].
pub fn silverman_bandwidth(counts: &[u64; 256]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    let value = |v: usize| v as f64 / 255.0;
    let nf = n as f64;
    let mean = counts.iter().enumerate().map(|(v, &c)| c as f64 * value(v)).sum::<f64>() / nf;
    let var = counts
        .iter()
        .enumerate()
        .map(|(v, &c)| c as f64 * (value(v) - mean).powi(2))
        .sum::<f64>()
        / (nf - 1.0);
    let sd = var.sqrt();
    let iqr = quantile(counts, n, 0.75) - quantile(counts, n, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    (0.9 * spread * nf.powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Linear-interpolation quantile (type 7) of the sorted sample described by a
/// histogram of 8-bit values, normalized to `[0, 1]`.
fn quantile(counts: &[u64; 256], n: u64, q: f64) -> f64 {
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as u64;
    let frac = h - lo as f64;
    let at = |rank: u64| -> f64 {
        let mut seen = 0;
        for (v, &c) in counts.iter().enumerate() {
            seen += c;
            if rank < seen {
                return v as f64 / 255.0;
            }
        }
        1.0
    };
    let a = at(lo);
    if frac == 0.0 {
        a
    } else {
        a + frac * (at((lo + 1).min(n - 1)) - a)
    }
}

const REFLECTIONS: i32 = 2;

fn curve_from_counts(channel: Channel, counts: &[u64; 256], bandwidth: f64) -> KdeCurve {
    let grid = kde_grid();
    let n: u64 = counts.iter().sum();
    let norm = 1.0 / (n as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .iter()
        .map(|&x| {
            let mut acc = 0.0;
            for (v, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let xi = v as f64 / 255.0;
                // mirror images about 0 and 1, repeated with period 2
                let mut k = 0.0;
                for m in -REFLECTIONS..=REFLECTIONS {
                    let shift = 2.0 * m as f64;
                    for centre in [shift + xi, shift - xi] {
                        let z = (x - centre) / bandwidth;
                        k += (-0.5 * z * z).exp();
                    }
                }
                acc += c as f64 * k;
            }
            acc * norm
        })
        .collect();
    KdeCurve { channel, grid, density, bandwidth }
}

/// KDE curves for the R, G and B channels over every pixel of every image.
pub fn kde_from_histogram(
    hist: &ChannelHistogram,
    bandwidth: Option<f64>,
) -> Result<[KdeCurve; 3], MetricsError> {
    if hist.total() == 0 {
        return Err(MetricsError::EmptyDataset);
    }
    if let Some(b) = bandwidth {
        if !(b > 0.0 && b.is_finite()) {
            return Err(MetricsError::InvalidBandwidth(b));
        }
    }
    let curve = |c: usize, ch: Channel| {
        let counts = &hist.counts[c];
        curve_from_counts(ch, counts, bandwidth.unwrap_or_else(|| silverman_bandwidth(counts)))
    };
    Ok([curve(0, Channel::R), curve(1, Channel::G), curve(2, Channel::B)])
}

pub fn kde_rgb<'a, I>(images: I, bandwidth: Option<f64>) -> Result<[KdeCurve; 3], MetricsError>
where
    I: IntoIterator<Item = &'a RgbImage>,
{
    let mut hist = ChannelHistogram::default();
    for img in images {
        hist.add(img);
    }
    kde_from_histogram(&hist, bandwidth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizationReport {
    /// L1 distance between densities for R, G, B.
    pub l1: [f64; 3],
    pub mean_l1: f64,
}

pub fn homogenization_report(
    original: &[KdeCurve; 3],
    condensed: &[KdeCurve; 3],
) -> Result<HomogenizationReport, MetricsError> {
    let mut l1 = [0.0; 3];
    for (c, (a, b)) in original.iter().zip(condensed).enumerate() {
        if a.grid != b.grid || a.density.len() != a.grid.len() || b.density.len() != b.grid.len() {
            return Err(MetricsError::GridMismatch);
        }
        let diff: Vec<f64> = a.density.iter().zip(&b.density).map(|(x, y)| (x - y).abs()).collect();
        l1[c] = trapezoid(&a.grid, &diff);
    }
    Ok(HomogenizationReport { l1, mean_l1: l1.iter().sum::<f64>() / 3.0 })
}
