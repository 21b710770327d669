use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use image::{Rgb, RgbImage};

use dc3_core::catalog::FeatureMatrix;
use dc3_core::metrics::{colorfulness, kde_rgb};
use dc3_core::quantizer::{kmeans_partition, KMeansParams};
use dc3_core::rng::SplitMix64;
use dc3_core::sampler::{select_per_class, static_gains, GainScope, SelectionMode};
use dc3_core::stitcher::{stitch, StitchStrategy};

fn features(n: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut rng = SplitMix64::new(seed);
    let data = (0..n * dim).map(|_| rng.next_gaussian() as f32).collect();
    FeatureMatrix::new(n, dim, data).unwrap()
}

fn noise(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = SplitMix64::new(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8]))
}

fn bench_sampler(c: &mut Criterion) {
    let mut group = c.benchmark_group("sampler");
    for n in [100, 400] {
        let f = features(n, 64, 1);
        group.bench_with_input(BenchmarkId::new("static_gains", n), &f, |b, f| {
            b.iter(|| static_gains(black_box(f), GainScope::Class).unwrap())
        });
        let params = KMeansParams { bins: 10, seed: 3, ..Default::default() };
        let part = kmeans_partition(&f, &params).unwrap().labelled("c", (0..n).collect());
        for mode in [SelectionMode::Static, SelectionMode::Greedy] {
            group.bench_with_input(BenchmarkId::new(format!("select_{mode}"), n), &f, |b, f| {
                b.iter(|| select_per_class(black_box(f), &part, 20, mode).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let mut group = c.benchmark_group("kmeans");
    for n in [300, 1300] {
        let f = features(n, 128, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &f, |b, f| {
            let params = KMeansParams { bins: 10, seed: 5, ..Default::default() };
            b.iter(|| kmeans_partition(black_box(f), &params).unwrap())
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let img = noise(224, 224, 7);
    c.bench_function("colorfulness_224", |b| b.iter(|| colorfulness(black_box(&img)).unwrap()));
    let images: Vec<RgbImage> = (0..8).map(|s| noise(64, 64, s)).collect();
    c.bench_function("kde_rgb_8x64", |b| b.iter(|| kde_rgb(black_box(&images), None).unwrap()));
}

fn bench_stitch(c: &mut Criterion) {
    let mut group = c.benchmark_group("stitch_224");
    let variants: Vec<RgbImage> = (0..4).map(|s| noise(224, 224, 10 + s)).collect();
    for strategy in [
        StitchStrategy::Half2,
        StitchStrategy::Quarter4,
        StitchStrategy::PixelMask { fraction: 0.5 },
        StitchStrategy::Grid { n: 16 },
    ] {
        let refs: Vec<&RgbImage> = variants.iter().take(strategy.variant_count()).collect();
        group.bench_function(strategy.to_string(), |b| {
            b.iter(|| stitch(black_box(&refs), &strategy, 9).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sampler, bench_kmeans, bench_metrics, bench_stitch);
criterion_main!(benches);
