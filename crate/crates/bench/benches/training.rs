use std::hint::black_box;

use bwbpf_bench::{first_batches, mnist_like, mnist_spec};
use bwbpf_core::arch::{DecoupledModel, Network};
use bwbpf_core::pipeline::{infallible, run_pipeline, PipelineConfig};
use bwbpf_core::trainer::{bp_step, bwbpf_step, LossWeights, SgdConfig, TrainState};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn steps(c: &mut Criterion) {
    let spec = mnist_spec();
    let data = mnist_like(4, 1);
    let batch = first_batches::<f32>(&data, 32, 1).remove(0);
    let cfg = SgdConfig::default();
    let mut group = c.benchmark_group("train step, vgg-small, batch 32");
    group.sample_size(20);
    let net = Network::<f32>::new(&spec, 1).unwrap();
    group.bench_function("end-to-end", |b| {
        b.iter_batched(
            || (net.clone(), TrainState::new(100)),
            |(mut net, mut state)| {
                black_box(bp_step(
                    &mut net,
                    batch.images.clone(),
                    &batch.labels,
                    &cfg,
                    &mut state,
                ))
            },
            BatchSize::LargeInput,
        )
    });
    for k in [1, 4, 8] {
        let model = DecoupledModel::<f32>::build(&spec, k, 1).unwrap();
        group.bench_function(format!("block-wise K={k}"), |b| {
            b.iter_batched(
                || (model.clone(), TrainState::new(100)),
                |(mut m, mut state)| {
                    black_box(bwbpf_step(
                        &mut m,
                        batch.images.clone(),
                        &batch.labels,
                        LossWeights::default(),
                        &cfg,
                        &mut state,
                    ))
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let spec = mnist_spec();
    let data = mnist_like(8, 2);
    let input = first_batches::<f32>(&data, 16, 4);
    let cfg = SgdConfig::default();
    let model = DecoupledModel::<f32>::build(&spec, 4, 2).unwrap();
    let mut group = c.benchmark_group("4 batches of 16, vgg-small, K=4");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || (model.clone(), TrainState::new(4)),
            |(mut m, mut state)| {
                for x in &input {
                    bwbpf_step(
                        &mut m,
                        x.images.clone(),
                        &x.labels,
                        LossWeights::default(),
                        &cfg,
                        &mut state,
                    )
                    .unwrap();
                }
            },
            BatchSize::LargeInput,
        )
    });
    group.bench_function("pipeline", |b| {
        b.iter_batched(
            || (model.clone(), TrainState::new(4)),
            |(mut m, mut state)| {
                black_box(
                    run_pipeline(
                        &mut m,
                        infallible(input.clone()),
                        LossWeights::default(),
                        &cfg,
                        &mut state,
                        &PipelineConfig::default(),
                    )
                    .unwrap(),
                )
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, steps, pipeline);
criterion_main!(benches);
