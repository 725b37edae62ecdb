//! Single-thread versus default-pool throughput of the two hot loops:
//! context generation and candidate scoring.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctxpaste::augment::{ranked_placements, AugmentationConfig};
use ctxpaste::context::{build_context_dataset, dataset_histogram, ContextGenParams};
use ctxpaste::par;
use ctxpaste::scorer::{train_builtin, TrainParams};
use ctxpaste::seeding;
use ctxpaste::synth::{generate_heldout_scenes, generate_synthetic_dataset, SynthSpec};

fn pools() -> [(&'static str, usize); 2] {
    [("sequential", 1), ("pool", 0)]
}

fn bench(c: &mut Criterion) {
    let spec = SynthSpec {
        n_images: 8,
        n_heldout: 1,
        ..Default::default()
    };
    let images = generate_synthetic_dataset(&spec).unwrap();
    let scene = &generate_heldout_scenes(&spec).unwrap()[0];
    let classes = spec.class_names();
    let hist = dataset_histogram(images.iter().map(|r| &r.annotation)).unwrap();
    let params = ContextGenParams {
        out_size: 64,
        ..Default::default()
    };
    let samples = build_context_dataset(&images, &classes, &hist, &params, 0).unwrap();
    let train = TrainParams {
        max_epochs: 2,
        ..Default::default()
    };
    let scorer = train_builtin(&samples, classes.clone(), &train).unwrap().scorer;
    let cfg = AugmentationConfig {
        context: params.clone(),
        ..Default::default()
    };

    let mut group = c.benchmark_group("contexts");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || build_context_dataset(&images, &classes, &hist, &params, 0).unwrap()))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("candidate_scoring");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| {
                par::with_threads(t, || {
                    let mut rng = seeding::stream(0, "bench");
                    ranked_placements(&scene.image, &[], &hist, &scorer, &cfg, &mut rng).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
