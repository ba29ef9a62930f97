use std::sync::Arc;

use super::conv::{conv2d, Conv2dGeometry};
use super::dense::dense;
use super::norm::{batchnorm_eval, batchnorm_train, update_running_stats, BN_EPS, BN_MOMENTUM};
use super::pool::{global_avg_pool, maxpool2d};
use crate::autodiff::{ParamId, Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How a forward pass treats the layer: normalization mode, and whether
/// parameters are recorded as differentiable leaves or as constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    pub trainable: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        mode: Mode::Train,
        trainable: true,
    };
    pub const EVAL: Pass = Pass {
        mode: Mode::Eval,
        trainable: false,
    };
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub id: ParamId,
    pub name: String,
    pub value: Arc<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    fn var(&self, tape: &mut Tape<T>, trainable: bool) -> Var<T> {
        if trainable {
            tape.param(&self.value, self.id)
        } else {
            Var::from_arc(Arc::clone(&self.value))
        }
    }

    /// Mutable access; clones only if a tape still shares the value.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }
}

/// Hands out consecutive parameter identities.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    next: u32,
}

impl ParamAllocator {
    pub fn starting_at(next: u32) -> Self {
        Self { next }
    }

    pub fn alloc<T: Scalar>(&mut self, name: impl Into<String>, value: Tensor<T>) -> Param<T> {
        let id = ParamId(self.next);
        self.next += 1;
        Param {
            id,
            name: name.into(),
            value: Arc::new(value),
        }
    }

    pub fn next_id(&self) -> u32 {
        self.next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Dense,
    BatchNorm,
    Relu,
    MaxPool,
    Gap,
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d {
        weight: Param<T>,
        bias: Option<Param<T>>,
        geom: Conv2dGeometry,
    },
    Dense {
        weight: Param<T>,
        bias: Param<T>,
    },
    BatchNorm {
        gamma: Param<T>,
        beta: Param<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        momentum: f64,
        eps: f64,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Gap,
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl<T: Scalar> Layer<T> {
    /// He-normal weights, zero bias.
    pub fn conv(
        alloc: &mut ParamAllocator,
        rng: &mut Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        geom: Conv2dGeometry,
        bias: bool,
    ) -> Result<Self> {
        let k = geom.kernel;
        let w = rng.normal(&[out_ch, in_ch, k, k], 0.0, he_std(in_ch * k * k))?;
        Ok(Layer::Conv2d {
            weight: alloc.alloc(format!("{name}.weight"), w),
            bias: bias.then(|| alloc.alloc(format!("{name}.bias"), Tensor::zeros(&[out_ch]))),
            geom,
        })
    }

    pub fn dense(
        alloc: &mut ParamAllocator,
        rng: &mut Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let w = rng.normal(&[out_features, in_features], 0.0, he_std(in_features))?;
        Ok(Layer::Dense {
            weight: alloc.alloc(format!("{name}.weight"), w),
            bias: alloc.alloc(format!("{name}.bias"), Tensor::zeros(&[out_features])),
        })
    }

    pub fn batchnorm(alloc: &mut ParamAllocator, name: &str, channels: usize) -> Self {
        Layer::BatchNorm {
            gamma: alloc.alloc(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: alloc.alloc(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool { .. } => LayerKind::MaxPool,
            Layer::Gap => LayerKind::Gap,
        }
    }

    /// Runs the layer. Batch-norm running statistics change only in
    /// [`Mode::Train`].
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Var<T>, pass: Pass) -> Result<Var<T>> {
        match self {
            Layer::Conv2d { weight, bias, geom } => {
                let w = weight.var(tape, pass.trainable);
                let b = bias.as_ref().map(|b| b.var(tape, pass.trainable));
                conv2d(tape, x, &w, b.as_ref(), *geom)
            }
            Layer::Dense { weight, bias } => {
                let w = weight.var(tape, pass.trainable);
                let b = bias.var(tape, pass.trainable);
                dense(tape, x, &w, &b)
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                momentum,
                eps,
            } => {
                let g = gamma.var(tape, pass.trainable);
                let b = beta.var(tape, pass.trainable);
                match pass.mode {
                    Mode::Train => {
                        let (y, stats) = batchnorm_train(tape, x, &g, &b, *eps)?;
                        update_running_stats(running_mean, running_var, &stats, *momentum);
                        Ok(y)
                    }
                    Mode::Eval => batchnorm_eval(tape, x, &g, &b, running_mean, running_var, *eps),
                }
            }
            Layer::Relu => tape.relu(x),
            Layer::MaxPool { kernel, stride } => maxpool2d(tape, x, *kernel, *stride),
            Layer::Gap => global_avg_pool(tape, x),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv2d { weight, bias, .. } => {
                std::iter::once(weight).chain(bias.as_ref()).collect()
            }
            Layer::Dense { weight, bias } => vec![weight, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv2d { weight, bias, .. } => {
                std::iter::once(weight).chain(bias.as_mut()).collect()
            }
            Layer::Dense { weight, bias } => vec![weight, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Padding;

    #[test]
    fn parameter_shapes_follow_kind() {
        let mut alloc = ParamAllocator::default();
        let mut rng = Rng::new(0);
        let conv = Layer::<f32>::conv(
            &mut alloc,
            &mut rng,
            "c",
            3,
            8,
            Conv2dGeometry::new(3, 1, Padding::Same),
            true,
        )
        .unwrap();
        let shapes: Vec<_> = conv
            .params()
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        assert_eq!(shapes, vec![vec![8, 3, 3, 3], vec![8]]);
        let bn = Layer::<f32>::batchnorm(&mut alloc, "bn", 8);
        assert_eq!(bn.params().len(), 2);
        let ids: Vec<u32> = conv
            .params()
            .iter()
            .chain(bn.params().iter())
            .map(|p| p.id.0)
            .collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn running_stats_only_move_in_train_mode() {
        let mut alloc = ParamAllocator::default();
        let mut bn = Layer::<f64>::batchnorm(&mut alloc, "bn", 2);
        let x = Var::constant(Rng::new(1).normal(&[4, 2, 3, 3], 1.0, 2.0).unwrap());
        let snapshot = |l: &Layer<f64>| match l {
            Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } => (running_mean.clone(), running_var.clone()),
            _ => unreachable!(),
        };
        let before = snapshot(&bn);
        bn.forward(&mut Tape::new(), &x, Pass::EVAL).unwrap();
        assert_eq!(snapshot(&bn), before);
        bn.forward(&mut Tape::new(), &x, Pass::TRAIN).unwrap();
        assert_ne!(snapshot(&bn), before);
    }

    #[test]
    fn frozen_pass_records_nothing() {
        let mut alloc = ParamAllocator::default();
        let mut rng = Rng::new(2);
        let mut dense = Layer::<f64>::dense(&mut alloc, &mut rng, "d", 3, 2).unwrap();
        let mut tape = Tape::new();
        let x = Var::constant(Tensor::ones(&[1, 3]));
        let y = dense.forward(&mut tape, &x, Pass::EVAL).unwrap();
        assert!(tape.is_empty());
        assert!(!y.requires_grad());
    }
}
