//! Shared fixtures for the criterion benches.

use bwbpf_core::arch::{build_preset, ArchitectureSpec};
use bwbpf_core::data::{batches, synthetic, Dataset};
use bwbpf_core::pipeline::PipelineBatch;
use bwbpf_core::Scalar;

/// `vgg-small` on 1x28x28 inputs, 10 classes.
pub fn mnist_spec() -> ArchitectureSpec {
    build_preset("vgg-small", 10, 1, 28).expect("preset")
}

pub fn mnist_like(per_class: usize, seed: u64) -> Dataset {
    synthetic(10, per_class, [1, 28, 28], seed, 4.0).expect("synthetic data")
}

/// The first `count` full batches of epoch 0.
pub fn first_batches<T: Scalar>(
    data: &Dataset,
    size: usize,
    count: usize,
) -> Vec<PipelineBatch<T>> {
    batches(data.len(), size, 0, 0)
        .expect("batches")
        .into_iter()
        .filter(|idx| idx.len() == size)
        .take(count)
        .map(|idx| {
            let (images, labels) = data.batch(&idx).expect("batch");
            PipelineBatch {
                epoch: 0,
                images,
                labels,
            }
        })
        .collect()
}
