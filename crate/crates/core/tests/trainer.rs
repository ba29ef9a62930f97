use std::collections::BTreeSet;

use bwbpf_core::arch::{param_snapshot, ArchitectureSpec, DecoupledModel, Network, UnitSpec};
use bwbpf_core::autodiff::{backward, ParamId, Tape, Var};
use bwbpf_core::data::synthetic;
use bwbpf_core::nn::{softmax_cross_entropy, Param, Pass};
use bwbpf_core::rng::Rng;
use bwbpf_core::trainer::{
    bp_step, bwbpf_step, loss_terms, weighted_total, LossWeights, SgdConfig, TrainState,
};
use bwbpf_core::Tensor;

fn small_spec() -> ArchitectureSpec {
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

fn batch(n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let data = synthetic(3, n, [1, 8, 8], seed, 4.0).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    data.batch(&idx).unwrap()
}

fn ids(params: &[&Param<f64>]) -> BTreeSet<ParamId> {
    params.iter().map(|p| p.id).collect()
}

fn same(a: &[&Param<f64>], b: &[&Param<f64>]) -> bool {
    let (a, b) = (param_snapshot(a), param_snapshot(b));
    a.len() == b.len()
        && a.iter()
            .zip(&b)
            .all(|((i, x), (j, y))| i == j && x.bitwise_eq(y))
}

#[test]
fn zero_local_weight_freezes_every_block() {
    let mut model = DecoupledModel::<f64>::build(&small_spec(), 2, 3).unwrap();
    let before = model.clone();
    let (x, y) = batch(4, 1);
    let w = LossWeights {
        lambda1: 1.0,
        lambda2: 0.0,
    };
    let m = bwbpf_step(
        &mut model,
        x,
        &y,
        w,
        &SgdConfig::default(),
        &mut TrainState::new(10),
    )
    .unwrap();
    for (a, b) in model.blocks().iter().zip(before.blocks()) {
        assert!(same(&a.params(), &b.params()));
    }
    assert!(!same(
        &model.classifier().params(),
        &before.classifier().params()
    ));
    assert!(m.local_losses.iter().all(|l| l.is_finite() && *l > 0.0));
    assert_eq!(m.total, m.global_loss);
}

#[test]
fn zero_global_weight_freezes_output_layer() {
    let mut model = DecoupledModel::<f64>::build(&small_spec(), 4, 3).unwrap();
    let before = model.clone();
    let (x, y) = batch(4, 1);
    let w = LossWeights {
        lambda1: 0.0,
        lambda2: 1.0,
    };
    bwbpf_step(
        &mut model,
        x,
        &y,
        w,
        &SgdConfig::default(),
        &mut TrainState::new(10),
    )
    .unwrap();
    assert!(same(
        &model.classifier().params(),
        &before.classifier().params()
    ));
    for (a, b) in model.blocks().iter().zip(before.blocks()) {
        assert!(!same(&a.body_params(), &b.body_params()));
    }
}

#[test]
fn first_block_matches_standalone_submodel() {
    let spec = small_spec();
    let cfg = SgdConfig::default();
    let mut model = DecoupledModel::<f64>::build(&spec, 2, 17).unwrap();
    let mut standalone = model.block_as_network(0).unwrap();
    let mut s1 = TrainState::new(50);
    let mut s2 = TrainState::new(50);
    for seed in 0..3 {
        let (x, y) = batch(4, seed);
        bwbpf_step(
            &mut model,
            x.clone(),
            &y,
            LossWeights::default(),
            &cfg,
            &mut s1,
        )
        .unwrap();
        bp_step(&mut standalone, x, &y, &cfg, &mut s2).unwrap();
        assert!(same(&model.blocks()[0].params(), &standalone.params()));
    }
}

#[test]
fn each_loss_reaches_only_its_own_parameters() {
    for k in [1, 2, 4] {
        let mut model = DecoupledModel::<f64>::build(&small_spec(), k, 5).unwrap();
        let (x, y) = batch(2, 2);
        let mut tape = Tape::new();
        let terms = loss_terms(&mut model, &mut tape, x, &y).unwrap();
        for (l, loss) in terms.locals.iter().enumerate() {
            let g = backward(&tape, loss).unwrap();
            let got: BTreeSet<ParamId> = g.param_ids().collect();
            assert_eq!(got, ids(&model.blocks()[l].params()), "K={k} block {l}");
        }
        let g = backward(&tape, &terms.global).unwrap();
        let got: BTreeSet<ParamId> = g.param_ids().collect();
        assert_eq!(got, ids(&model.classifier().params()));
    }
}

#[test]
fn local_weight_scales_block_updates_exactly() {
    let cfg = SgdConfig {
        weight_decay: 0.0,
        ..SgdConfig::default()
    };
    let (x, y) = batch(3, 4);
    let run = |lambda2: f64| {
        let mut model = DecoupledModel::<f64>::build(&small_spec(), 2, 8).unwrap();
        let mut state = TrainState::new(10);
        let w = LossWeights {
            lambda1: 1.0,
            lambda2,
        };
        bwbpf_step(&mut model, x.clone(), &y, w, &cfg, &mut state).unwrap();
        let block_ids: BTreeSet<ParamId> = model
            .blocks()
            .iter()
            .flat_map(|b| b.params())
            .map(|p| p.id)
            .collect();
        (state.velocities, block_ids)
    };
    let (v1, block_ids) = run(1.0);
    for c in [2.0, 0.25] {
        let (vc, _) = run(c);
        for id in &block_ids {
            assert!(
                vc[id].bitwise_eq(&v1[id].scale(c)),
                "param {id} with c = {c}"
            );
        }
    }
}

#[test]
fn logged_total_is_weighted_sum() {
    let mut model = DecoupledModel::<f64>::build(&small_spec(), 4, 1).unwrap();
    let (x, y) = batch(2, 3);
    let w = LossWeights {
        lambda1: 0.7,
        lambda2: 1.3,
    };
    let m = bwbpf_step(
        &mut model,
        x,
        &y,
        w,
        &SgdConfig::default(),
        &mut TrainState::new(4),
    )
    .unwrap();
    let sum = ((m.local_losses[0] + m.local_losses[1]) + m.local_losses[2]) + m.local_losses[3];
    let expected = 0.7 * m.global_loss + 1.3 * sum;
    assert_eq!(m.total.to_bits(), expected.to_bits());
    assert_eq!(m.total, weighted_total(w, m.global_loss, &m.local_losses));
}

fn linear_model(features: usize, classes: usize) -> Network<f64> {
    let spec = ArchitectureSpec {
        name: "linear".into(),
        in_channels: features,
        input_size: 1,
        num_classes: classes,
        stem: None,
        units: Vec::new(),
    };
    Network::new(&spec, 2).unwrap()
}

#[test]
fn end_to_end_step_matches_closed_form_gradient() {
    let (f, n, b) = (5, 3, 4);
    let mut net = linear_model(f, n);
    let x = Rng::new(1).normal::<f64>(&[b, f, 1, 1], 0.0, 1.0).unwrap();
    let y = vec![0, 2, 1, 2];
    let w0 = net.params()[0].value.as_ref().clone();
    let b0 = net.params()[1].value.as_ref().clone();
    let cfg = SgdConfig {
        momentum: 0.0,
        weight_decay: 0.0,
        lr0: 0.1,
        ..SgdConfig::default()
    };

    // Oracle: dL/dW = (softmax - onehot)^T x / B, dL/db = column sums / B.
    let mut dw = vec![0.0; n * f];
    let mut db = vec![0.0; n];
    let mut loss = 0.0;
    for i in 0..b {
        let xi = &x.data()[i * f..(i + 1) * f];
        let z: Vec<f64> = (0..n)
            .map(|c| b0.data()[c] + (0..f).map(|j| w0.data()[c * f + j] * xi[j]).sum::<f64>())
            .collect();
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        loss += -(e[y[i]] / s).ln() / b as f64;
        for c in 0..n {
            let d = (e[c] / s - f64::from(u8::from(c == y[i]))) / b as f64;
            db[c] += d;
            for j in 0..f {
                dw[c * f + j] += d * xi[j];
            }
        }
    }
    let m = bp_step(&mut net, x, &y, &cfg, &mut TrainState::new(1)).unwrap();
    assert!((m.global_loss - loss).abs() < 1e-12);
    let w1 = &net.params()[0].value;
    let b1 = &net.params()[1].value;
    for (k, g) in dw.iter().enumerate() {
        assert!((w1.data()[k] - (w0.data()[k] - 0.1 * g)).abs() < 1e-12);
    }
    for (k, g) in db.iter().enumerate() {
        assert!((b1.data()[k] - (b0.data()[k] - 0.1 * g)).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rate_and_logged_loss() {
    let mut net = linear_model(4, 3);
    let before = net.clone();
    let x = Rng::new(4).normal::<f64>(&[3, 4, 1, 1], 0.0, 1.0).unwrap();
    let y = vec![1, 0, 2];
    let mut reference = net.clone();
    let mut tape = Tape::new();
    let logits = reference
        .forward(&mut tape, &Var::constant(x.clone()), Pass::TRAIN)
        .unwrap();
    let expected = softmax_cross_entropy(&mut tape, &logits, &y)
        .unwrap()
        .0
        .value()
        .item()
        .unwrap();

    let cfg = SgdConfig {
        lr0: 0.0,
        lr_final: 0.0,
        ..SgdConfig::default()
    };
    let m = bp_step(&mut net, x, &y, &cfg, &mut TrainState::new(1)).unwrap();
    assert!(same(&net.params(), &before.params()));
    assert_eq!(m.global_loss.to_bits(), expected.to_bits());
    assert!(m.local_losses.is_empty());
}
