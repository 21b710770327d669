//! Seeded toy datasets: Gaussian feature blobs per class and small,
//! low-saturation images.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::catalog::{write_features, CatalogError, DatasetManifest, FeatureMatrix, SampleRecord};
use crate::raster;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// Gaussian sub-clusters per class; samples are dealt round-robin.
    pub modes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { classes: 3, per_class: 30, dim: 8, width: 16, height: 16, seed: 0, modes: 1 }
    }
}

/// A muted image: a gray base with a faint tint and per-pixel noise.
pub fn low_saturation_image(width: u32, height: u32, rng: &mut SplitMix64) -> RgbImage {
    let base = 70.0 + 110.0 * rng.next_f64();
    let tint: Vec<f64> = (0..3).map(|_| 12.0 * (rng.next_f64() - 0.5)).collect();
    let slope = 30.0 * (rng.next_f64() - 0.5);
    RgbImage::from_fn(width, height, |x, y| {
        let ramp = slope * (x + y) as f64 / (width + height).max(1) as f64;
        let noise = 4.0 * (rng.next_f64() - 0.5);
        let px = |c: usize| (base + ramp + tint[c] + noise).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Feature rows for `spec`: each class is a mixture of `modes` unit-variance
/// blobs scattered around a random class centre.
pub fn features(spec: &SynthSpec) -> FeatureMatrix {
    let mut rng = SplitMix64::new(spec.seed);
    let mut data = Vec::with_capacity(spec.classes * spec.per_class * spec.dim);
    let spread = if spec.modes > 1 { 8.0 } else { 0.0 };
    for _ in 0..spec.classes {
        let centre: Vec<f64> = (0..spec.dim).map(|_| 10.0 * rng.next_gaussian()).collect();
        let modes: Vec<Vec<f64>> = (0..spec.modes.max(1))
            .map(|_| centre.iter().map(|c| c + spread * rng.next_gaussian()).collect())
            .collect();
        for k in 0..spec.per_class {
            let m = &modes[k % modes.len()];
            data.extend(m.iter().map(|c| (c + rng.next_gaussian()) as f32));
        }
    }
    FeatureMatrix::new(spec.classes * spec.per_class, spec.dim, data)
        .expect("shape matches by construction")
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes `manifest.json`, `features.bin` and `images/` under `dir`.
pub fn write_dataset(spec: &SynthSpec, dir: &Path) -> Result<DatasetManifest, SynthError> {
    std::fs::create_dir_all(dir.join("images"))?;
    let feats = features(spec);
    write_features(&feats, &dir.join("features.bin"))?;
    let mut rng = SplitMix64::new(spec.seed ^ 0x1D);
    let classes: Vec<String> = (0..spec.classes).map(|c| format!("c{c}")).collect();
    let mut samples = Vec::with_capacity(feats.count());
    for (ci, class) in classes.iter().enumerate() {
        for k in 0..spec.per_class {
            let id = format!("{class}_{k:04}");
            let rel = format!("images/{id}.png");
            raster::save_png(&dir.join(&rel), &low_saturation_image(spec.width, spec.height, &mut rng))?;
            samples.push(SampleRecord {
                id,
                class_label: class.clone(),
                image_path: rel,
                feature_row: ci * spec.per_class + k,
            });
        }
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", spec.seed),
        classes,
        feature_file: "features.bin".into(),
        samples,
        root: dir.to_path_buf(),
    };
    std::fs::write(dir.join("manifest.json"), manifest.to_json())?;
    Ok(manifest)
}
