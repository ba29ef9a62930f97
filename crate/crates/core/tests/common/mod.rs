#![allow(dead_code)]

use bwbpf_core::arch::{param_snapshot, ArchitectureSpec, DecoupledModel, UnitSpec};
use bwbpf_core::data::{batches, synthetic, Dataset};
use bwbpf_core::nn::Param;
use bwbpf_core::pipeline::PipelineBatch;
use bwbpf_core::Scalar;

/// Four plain units on 1x8x8 inputs, 3 classes.
pub fn tiny_spec() -> ArchitectureSpec {
    let plain = |w, pool| UnitSpec::Plain {
        out_channels: w,
        pool,
    };
    ArchitectureSpec {
        name: "tiny-plain".into(),
        in_channels: 1,
        input_size: 8,
        num_classes: 3,
        stem: None,
        units: vec![
            plain(4, false),
            plain(4, true),
            plain(6, false),
            plain(6, true),
        ],
    }
}

pub fn tiny_data(per_class: usize, seed: u64) -> Dataset {
    synthetic(3, per_class, [1, 8, 8], seed, 4.0).unwrap()
}

/// `count` batches of `size` drawn epoch after epoch from `data`.
pub fn stream<T: Scalar>(
    data: &Dataset,
    size: usize,
    count: usize,
    seed: u64,
) -> Vec<PipelineBatch<T>> {
    let mut out = Vec::with_capacity(count);
    let mut epoch = 0;
    while out.len() < count {
        for idx in batches(data.len(), size, seed, epoch).unwrap() {
            if out.len() == count || idx.len() < 2 {
                break;
            }
            let (images, labels) = data.batch(&idx).unwrap();
            out.push(PipelineBatch {
                epoch,
                images,
                labels,
            });
        }
        epoch += 1;
    }
    out
}

pub fn same_params<T: Scalar>(a: &[&Param<T>], b: &[&Param<T>]) -> bool {
    let (a, b) = (param_snapshot(a), param_snapshot(b));
    a.len() == b.len()
        && a.iter()
            .zip(&b)
            .all(|((i, x), (j, y))| i == j && x.bitwise_eq(y))
}

pub fn same_model<T: Scalar>(a: &DecoupledModel<T>, b: &DecoupledModel<T>) -> bool {
    same_params(&a.params(), &b.params())
}

/// Batch-norm running statistics, block order.
pub fn running_stats<T: Scalar>(m: &DecoupledModel<T>) -> Vec<bwbpf_core::Tensor<T>> {
    let mut out = Vec::new();
    for block in m.blocks() {
        for unit in block.stem().into_iter().chain(block.units()) {
            for layer in unit.layers() {
                if let bwbpf_core::nn::Layer::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                } = layer
                {
                    out.push(running_mean.clone());
                    out.push(running_var.clone());
                }
            }
        }
    }
    out
}

pub fn same_state<T: Scalar>(a: &DecoupledModel<T>, b: &DecoupledModel<T>) -> bool {
    let (ra, rb) = (running_stats(a), running_stats(b));
    same_model(a, b) && ra.len() == rb.len() && ra.iter().zip(&rb).all(|(x, y)| x.bitwise_eq(y))
}
