//! Parallel-vs-sequential scheduling benchmarks.
//!
//! Each group runs the same deterministic workload through the chunked
//! parallel scheduler and through its sequential twin. The workloads mirror
//! the three per-item jobs the training loop actually schedules: encoder
//! forward passes, nearest-demo index scans, and gradient accumulation.
//! Results are bitwise identical across the two paths by construction; the
//! benchmark measures scheduling overhead and (on multicore hosts) speedup.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use demoguide::envsim::{render_at, MazeConfig, Observation};
use demoguide::latentmodel::{LatentModel, ModelArch};
use demoguide::shaping::{embed_observation, DemoEmbeddingIndex};
use demoguide::{par, rng};

const IMAGE_SIDE: usize = 32;
const LATENT_DIM: usize = 8;
const BATCH: usize = 64;

fn bench_arch() -> ModelArch {
    ModelArch {
        image_side: IMAGE_SIDE,
        latent_dim: LATENT_DIM,
        action_dim: 2,
        enc_channels: 8,
        enc_fc: 64,
        dec_hidden: 64,
        dyn_hidden: 64,
    }
}

/// Renders `n` observations along a sweep through the free space of the
/// default maze.
fn sweep_observations(n: usize) -> Vec<Observation> {
    let maze = MazeConfig::from_rows(&["S#G", "...", "..."]).expect("default maze rows parse");
    (0..n)
        .map(|i| {
            let f = i as f64 / n as f64;
            let x = 0.3 + 2.4 * f;
            let y = 1.3 + 0.8 * ((i % 7) as f64 / 7.0);
            render_at(&maze, (x, y))
        })
        .collect()
}

fn bench_batch_encode(c: &mut Criterion) {
    let model =
        LatentModel::<f32>::new(bench_arch(), &mut rng::stream(11, "bench-encode-init"))
            .expect("model construction succeeds");
    let obs = sweep_observations(BATCH);

    let mut group = c.benchmark_group("batch_encode");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            par::map_items(black_box(&obs), |o| {
                embed_observation(&model, o).expect("encoding a rendered frame succeeds")
            })
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            par::map_items_seq(black_box(&obs), |o| {
                embed_observation(&model, o).expect("encoding a rendered frame succeeds")
            })
        })
    });
    group.finish();
}

/// Builds an index of `demos` demos, each `steps` embeddings long, laid out
/// on a deterministic curve in latent space.
fn synthetic_index(demos: usize, steps: usize) -> DemoEmbeddingIndex {
    let embeddings = (0..demos)
        .map(|d| {
            let path = (0..=steps)
                .map(|t| {
                    (0..LATENT_DIM)
                        .map(|k| {
                            let phase = (d * 31 + t * 7 + k * 3) as f64 * 0.1;
                            phase.sin() + 0.01 * t as f64
                        })
                        .collect()
                })
                .collect();
            (d, path)
        })
        .collect();
    DemoEmbeddingIndex::from_embeddings(embeddings, 1).expect("synthetic index is well formed")
}

fn bench_nearest_demo(c: &mut Criterion) {
    let index = synthetic_index(20, 30);
    let queries: Vec<Vec<f64>> = (0..BATCH)
        .map(|i| (0..LATENT_DIM).map(|k| ((i * 13 + k * 5) as f64 * 0.07).cos()).collect())
        .collect();

    let mut group = c.benchmark_group("nearest_demo_scan");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            par::map_items(black_box(&queries), |q| {
                index.nearest(q).expect("index is non-empty and dimensions match")
            })
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            par::map_items_seq(black_box(&queries), |q| {
                index.nearest(q).expect("index is non-empty and dimensions match")
            })
        })
    });
    group.finish();
}

const GRAD_SLOTS: usize = 16384;

/// Per-item contribution shaped like a flattened conv-layer gradient.
fn fake_gradient_into(acc: &mut [f64], item: usize) {
    let s = (item + 1) as f64;
    for (j, slot) in acc.iter_mut().enumerate() {
        *slot += (s * 0.003 + j as f64 * 1.7e-5) * (1.0 - 2.0 * ((item + j) % 2) as f64);
    }
}

fn bench_grad_accumulate(c: &mut Criterion) {
    let items: Vec<usize> = (0..BATCH).collect();

    let mut group = c.benchmark_group("grad_accumulate");
    group.sample_size(20);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            par::fold_items(
                black_box(&items),
                || vec![0.0f64; GRAD_SLOTS],
                |acc, &i| fake_gradient_into(acc, i),
                |acc, part| {
                    for (a, p) in acc.iter_mut().zip(&part) {
                        *a += p;
                    }
                },
            )
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            par::fold_items_seq(
                black_box(&items),
                || vec![0.0f64; GRAD_SLOTS],
                |acc, &i| fake_gradient_into(acc, i),
                |acc, part| {
                    for (a, p) in acc.iter_mut().zip(&part) {
                        *a += p;
                    }
                },
            )
        })
    });
    group.finish();
}

criterion_group!(benches, bench_batch_encode, bench_nearest_demo, bench_grad_accumulate);
criterion_main!(benches);
