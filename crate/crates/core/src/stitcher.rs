//! Crop-and-stitch fusion of compensated variants.
//!
//! Every strategy is expressed as a per-pixel source map ([`ProvenanceMask`]);
//! stitching copies each output pixel from the same coordinate of the chosen
//! variant, so nothing is blended or resampled.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

pub const DEFAULT_PIXEL_FRACTION: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum StitchError {
    #[error("variants have differing dimensions")]
    DimensionMismatch,
    #[error("strategy {strategy} needs {expected} variants, got {got}")]
    WrongVariantCount { strategy: String, expected: usize, got: usize },
    #[error("grid {n}x{n} does not fit a {width}x{height} image")]
    GridTooFine { n: u32, width: u32, height: u32 },
    #[error("invalid stitch strategy: {0}")]
    InvalidStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StitchStrategy {
    /// Left half from variant 0, right half from variant 1.
    #[default]
    Half2,
    /// Quadrants TL, TR, BL, BR from variants 0..4.
    Quarter4,
    /// A seeded uniform subset of pixels from variant 0, the rest from 1.
    #[serde(rename = "pixels")]
    PixelMask { fraction: f64 },
    /// `n×n` cells, a seeded half of them from variant 0.
    Grid { n: u32 },
}

impl StitchStrategy {
    pub fn variant_count(&self) -> usize {
        match self {
            StitchStrategy::Quarter4 => 4,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<(), StitchError> {
        match *self {
            StitchStrategy::PixelMask { fraction } if !(0.0..=1.0).contains(&fraction) => Err(
                StitchError::InvalidStrategy(format!("pixel fraction {fraction} outside [0, 1]")),
            ),
            StitchStrategy::Grid { n: 0 } => {
                Err(StitchError::InvalidStrategy("grid size must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for StitchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StitchStrategy::Half2 => f.write_str("half2"),
            StitchStrategy::Quarter4 => f.write_str("quarter4"),
            StitchStrategy::PixelMask { fraction } => write!(f, "pixels:{fraction}"),
            StitchStrategy::Grid { n } => write!(f, "grid:{n}"),
        }
    }
}

impl FromStr for StitchStrategy {
    type Err = StitchError;

    /// Parses `half2`, `quarter4`, `pixels[:F]` or `grid:N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StitchError::InvalidStrategy(s.to_string());
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let strategy = match (head, arg) {
            ("half2", None) => StitchStrategy::Half2,
            ("quarter4", None) => StitchStrategy::Quarter4,
            ("pixels", None) => StitchStrategy::PixelMask { fraction: DEFAULT_PIXEL_FRACTION },
            ("pixels", Some(a)) => StitchStrategy::PixelMask { fraction: a.parse().map_err(|_| bad())? },
            ("grid", Some(a)) => StitchStrategy::Grid { n: a.parse().map_err(|_| bad())? },
            _ => return Err(bad()),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Source variant index for every pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceMask {
    pub width: u32,
    pub height: u32,
    pub sources: Vec<u8>,
}

impl ProvenanceMask {
    pub fn source(&self, x: u32, y: u32) -> u8 {
        self.sources[(y * self.width + x) as usize]
    }

    pub fn count(&self, source: u8) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }
}

/// Start of cell `i` out of `n` along an axis of length `len`; the last
/// cell absorbs the remainder.
fn cell_start(i: u32, n: u32, len: u32) -> u32 {
    i * (len / n)
}

pub fn provenance_mask(
    strategy: &StitchStrategy,
    seed: u64,
    width: u32,
    height: u32,
) -> Result<ProvenanceMask, StitchError> {
    strategy.validate()?;
    let (w, h) = (width as usize, height as usize);
    let mut sources = vec![0u8; w * h];
    match *strategy {
        StitchStrategy::Half2 => {
            let split = width.div_ceil(2);
            for y in 0..height {
                for x in split..width {
                    sources[(y * width + x) as usize] = 1;
                }
            }
        }
        StitchStrategy::Quarter4 => {
            let (sx, sy) = (width.div_ceil(2), height.div_ceil(2));
            for y in 0..height {
                for x in 0..width {
                    sources[(y * width + x) as usize] = (x >= sx) as u8 + 2 * (y >= sy) as u8;
                }
            }
        }
        StitchStrategy::PixelMask { fraction } => {
            let total = w * h;
            let from_first = (fraction * total as f64).round() as usize;
            let mut order: Vec<usize> = (0..total).collect();
            SplitMix64::new(seed).shuffle(&mut order);
            for &p in &order[from_first..] {
                sources[p] = 1;
            }
        }
        StitchStrategy::Grid { n } => {
            if width < n || height < n {
                return Err(StitchError::GridTooFine { n, width, height });
            }
            let cells = (n * n) as usize;
            let mut order: Vec<usize> = (0..cells).collect();
            SplitMix64::new(seed).shuffle(&mut order);
            let mut cell_source = vec![0u8; cells];
            for &c in &order[cells.div_ceil(2)..] {
                cell_source[c] = 1;
            }
            for cy in 0..n {
                let y1 = if cy + 1 == n { height } else { cell_start(cy + 1, n, height) };
                for cx in 0..n {
                    let x1 = if cx + 1 == n { width } else { cell_start(cx + 1, n, width) };
                    let src = cell_source[(cy * n + cx) as usize];
                    for y in cell_start(cy, n, height)..y1 {
                        for x in cell_start(cx, n, width)..x1 {
                            sources[(y * width + x) as usize] = src;
                        }
                    }
                }
            }
        }
    }
    Ok(ProvenanceMask { width, height, sources })
}

pub fn stitch(
    variants: &[&RgbImage],
    strategy: &StitchStrategy,
    seed: u64,
) -> Result<RgbImage, StitchError> {
    let expected = strategy.variant_count();
    if variants.len() != expected {
        return Err(StitchError::WrongVariantCount {
            strategy: strategy.to_string(),
            expected,
            got: variants.len(),
        });
    }
    let (w, h) = variants[0].dimensions();
    if variants.iter().any(|v| v.dimensions() != (w, h)) {
        return Err(StitchError::DimensionMismatch);
    }
    let mask = provenance_mask(strategy, seed, w, h)?;
    Ok(RgbImage::from_fn(w, h, |x, y| {
        *variants[mask.source(x, y) as usize].get_pixel(x, y)
    }))
}
