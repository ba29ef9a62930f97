use std::sync::Arc;

use crate::autodiff::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch statistics of one train-mode pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

struct BatchNormRule<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    gamma: Arc<Tensor<T>>,
    /// Batch statistics depend on the input (train mode) or not (eval).
    batch_stats: bool,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "batch norm expects [B,C,H,W], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2] * shape[3]))
}

impl<T: Scalar> BackwardRule<T> for BatchNormRule<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (b, c, hw) = channel_layout(grad.shape())?;
        let g = grad.data();
        let xh = self.xhat.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for n in 0..b {
            for ch in 0..c {
                let start = (n * c + ch) * hw;
                for i in start..start + hw {
                    dbeta[ch] = dbeta[ch] + g[i];
                    dgamma[ch] = dgamma[ch] + g[i] * xh[i];
                }
            }
        }
        let dx = if needs[0] {
            let count = T::of((b * hw) as f64);
            let mut dx = vec![T::zero(); g.len()];
            for n in 0..b {
                for ch in 0..c {
                    let gamma = self.gamma.data()[ch];
                    let k = gamma * self.inv_std[ch];
                    let start = (n * c + ch) * hw;
                    for i in start..start + hw {
                        dx[i] = if self.batch_stats {
                            k * (g[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            Some(Tensor::new(grad.shape().to_vec(), dx)?)
        } else {
            None
        };
        Ok(vec![
            dx,
            needs[1].then(|| Tensor::new(vec![c], dgamma)).transpose()?,
            needs[2].then(|| Tensor::new(vec![c], dbeta)).transpose()?,
        ])
    }
}

fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, c, hw) = channel_layout(x.shape())?;
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for n in 0..b {
        for ch in 0..c {
            let (m, s) = (mean[ch], inv_std[ch]);
            let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
            let start = (n * c + ch) * hw;
            for i in start..start + hw {
                let h = (xd[i] - m) * s;
                xhat[i] = h;
                y[i] = ga * h + be;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        Tensor::new(x.shape().to_vec(), xhat)?,
    ))
}

fn check_affine<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Result<usize> {
    let (_, c, _) = channel_layout(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    Ok(c)
}

/// Train-mode batch normalization: standardize each channel with the batch
/// statistics, then `γ·x̂ + β`.
pub fn batchnorm_train<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: f64,
) -> Result<(Var<T>, BatchStats<T>)> {
    let c = check_affine(x, gamma, beta)?;
    let (b, _, hw) = channel_layout(x.shape())?;
    let count = b * hw;
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch norm in train mode needs at least 2 elements per channel, got {count}"
        )));
    }
    let xd = x.value().data();
    let n = T::of(count as f64);
    let mut mean = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let start = (bi * c + ch) * hw;
            mean[ch] = xd[start..start + hw].iter().fold(mean[ch], |s, &v| s + v);
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let start = (bi * c + ch) * hw;
            let m = mean[ch];
            var[ch] = xd[start..start + hw]
                .iter()
                .fold(var[ch], |s, &v| s + (v - m) * (v - m));
        }
    }
    var.iter_mut().for_each(|v| *v = *v / n);
    let eps = T::of(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x.value(), &mean, &inv_std, gamma.value(), beta.value())?;
    let rule = BatchNormRule {
        xhat,
        inv_std,
        gamma: Arc::clone(gamma.value_arc()),
        batch_stats: true,
    };
    let out = tape.record(y, &[x, gamma, beta], rule)?;
    Ok((out, BatchStats { mean, var, count }))
}

/// Eval-mode batch normalization with fixed running statistics.
pub fn batchnorm_eval<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var<T>> {
    check_affine(x, gamma, beta)?;
    let eps = T::of(eps);
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let (y, xhat) = normalize(
        x.value(),
        running_mean.data(),
        &inv_std,
        gamma.value(),
        beta.value(),
    )?;
    let rule = BatchNormRule {
        xhat,
        inv_std,
        gamma: Arc::clone(gamma.value_arc()),
        batch_stats: false,
    };
    tape.record(y, &[x, gamma, beta], rule)
}

/// Exponential moving update of running statistics; the running variance
/// uses the unbiased batch variance.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    stats: &BatchStats<T>,
    momentum: f64,
) {
    let m = T::of(momentum);
    let keep = T::one() - m;
    let correction = T::of(stats.count as f64 / (stats.count as f64 - 1.0));
    for (r, &v) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = keep * *r + m * v;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = keep * *r + m * v * correction;
    }
}
