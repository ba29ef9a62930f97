use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId};
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Scalar, Tensor};

/// Momentum buffers keyed by parameter identity.
pub type Velocities<T> = BTreeMap<ParamId, Tensor<T>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Cosine,
    /// Piecewise constant, `decay_drops` geometric drops from `lr0` to
    /// `lr_final` spread evenly over the run.
    StepDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
pub struct SgdConfig {
    pub lr0: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub decay_drops: u32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            lr_final: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 5,
            schedule: Schedule::Cosine,
            decay_drops: 3,
        }
    }
}

impl SgdConfig {
    /// Every violated constraint, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("lr0", self.lr0),
            ("lr-final", self.lr_final),
            ("momentum", self.momentum),
            ("weight-decay", self.weight_decay),
        ] {
            if !v.is_finite() {
                out.push(format!("{name} must be finite, got {v}"));
            }
        }
        if !(self.lr_final > 0.0) {
            out.push(format!("lr-final must be > 0, got {}", self.lr_final));
        }
        if !(self.lr0 >= self.lr_final) {
            out.push(format!(
                "lr0 ({}) must be >= lr-final ({})",
                self.lr0, self.lr_final
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!(
                "weight-decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            out.push("batch-size must be >= 1".into());
        }
        if self.epochs == 0 {
            out.push("epochs must be >= 1".into());
        }
        if self.schedule == Schedule::StepDecay && self.decay_drops == 0 {
            out.push("decay-drops must be >= 1 for the step-decay schedule".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Learning rate at `step` of a `total`-step run; `step` is clamped to
/// `0..=total`.
pub fn lr_at(step: u64, total: u64, cfg: &SgdConfig) -> f64 {
    if total == 0 {
        return cfg.lr0;
    }
    let step = step.min(total);
    match cfg.schedule {
        Schedule::Cosine => {
            let t = step as f64 / total as f64;
            cfg.lr_final + 0.5 * (cfg.lr0 - cfg.lr_final) * (1.0 + (PI * t).cos())
        }
        Schedule::StepDecay => {
            let drops = u64::from(cfg.decay_drops.max(1));
            let done = (step * (drops + 1) / total).min(drops);
            if done == drops {
                return cfg.lr_final;
            }
            let ratio = (cfg.lr_final / cfg.lr0).powf(1.0 / drops as f64);
            cfg.lr0 * ratio.powi(done as i32)
        }
    }
}

/// One momentum step: `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`.
pub fn sgd_update<T: Scalar>(
    param: &mut Param<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    if grad.shape() != param.value.shape() || velocity.shape() != param.value.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgd_update",
            lhs: param.value.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if grad.data().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            param: format!("{} ({})", param.name, param.id),
        });
    }
    let (m, wd, lr) = (T::of(cfg.momentum), T::of(cfg.weight_decay), T::of(lr));
    let theta = param.value_mut();
    for ((t, v), &g) in theta
        .data_mut()
        .iter_mut()
        .zip(velocity.data_mut())
        .zip(grad.data())
    {
        *v = m * *v + g + wd * *t;
        *t = *t - lr * *v;
    }
    Ok(())
}

/// Applies `scale · grad` to every parameter that received a gradient.
/// Parameters absent from `grads` are left untouched.
pub fn apply_gradients<'a, T: Scalar + 'a>(
    params: impl IntoIterator<Item = &'a mut Param<T>>,
    grads: &Gradients<T>,
    scale: f64,
    velocities: &mut Velocities<T>,
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    for param in params {
        let Some(g) = grads.param(param.id) else {
            continue;
        };
        let scaled;
        let g = if scale == 1.0 {
            g
        } else {
            scaled = g.scale(T::of(scale));
            &scaled
        };
        let v = velocities
            .entry(param.id)
            .or_insert_with(|| Tensor::zeros(param.value.shape()));
        sgd_update(param, g, v, cfg, lr)?;
    }
    Ok(())
}
