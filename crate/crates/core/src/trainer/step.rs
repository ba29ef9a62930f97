use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sgd::{apply_gradients, lr_at, SgdConfig, Velocities};
use crate::arch::{Block, DecoupledModel, Head, Network};
use crate::autodiff::{backward, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, softmax_cross_entropy, Pass};
use crate::tensor::{Scalar, Tensor};

/// `λ1` weighs the output-layer loss, `λ2` every local loss. A zero weight
/// removes the term from the update; its value is still logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<String> {
        [("lambda1", self.lambda1), ("lambda2", self.lambda2)]
            .into_iter()
            .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(n, v)| format!("{n} must be finite and >= 0, got {v}"))
            .collect()
    }
}

/// `λ1·global + λ2·(l1 + l2 + …)`, locals summed left to right.
pub fn weighted_total(weights: LossWeights, global: f64, locals: &[f64]) -> f64 {
    let sum = locals.iter().fold(0.0, |acc, &l| acc + l);
    weights.lambda1 * global + weights.lambda2 * sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    /// Output-layer loss.
    pub global_loss: f64,
    /// One entry per block, block order. Empty for end-to-end training.
    pub local_losses: Vec<f64>,
    pub total: f64,
    /// Output-layer predictions on the training batch.
    pub correct: usize,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub velocities: Velocities<T>,
    pub step: u64,
    pub epoch: u64,
    pub total_steps: u64,
    pub log: Vec<StepMetrics>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(total_steps: u64) -> Self {
        Self {
            velocities: Velocities::new(),
            step: 0,
            epoch: 0,
            total_steps,
            log: Vec::new(),
        }
    }

    pub fn lr(&self, cfg: &SgdConfig) -> f64 {
        lr_at(self.step, self.total_steps, cfg)
    }
}

fn scalar_value<T: Scalar>(v: &Var<T>) -> Result<f64> {
    Ok(v.value().item()?.as_f64())
}

/// A block's forward pass on its own tape.
pub struct BlockForward<T> {
    tape: Tape<T>,
    output: Var<T>,
}

impl<T: Scalar> BlockForward<T> {
    /// The block output, detached: what the next block receives.
    pub fn output(&self) -> Arc<Tensor<T>> {
        Arc::clone(self.output.value_arc())
    }
}

/// Runs `block` in training mode on a detached `input`.
pub fn block_forward<T: Scalar>(
    block: &mut Block<T>,
    input: Arc<Tensor<T>>,
) -> Result<BlockForward<T>> {
    let mut tape = Tape::new();
    let output = block.forward(&mut tape, &Var::from_arc(input), Pass::TRAIN)?;
    Ok(BlockForward { tape, output })
}

/// Local loss of `block` from its head, then one SGD step of the block and
/// head with `lambda2 · ∇loss`. Returns the loss.
pub fn local_update<T: Scalar>(
    block: &mut Block<T>,
    forward: BlockForward<T>,
    labels: &[usize],
    lambda2: f64,
    cfg: &SgdConfig,
    lr: f64,
    velocities: &mut Velocities<T>,
) -> Result<f64> {
    let BlockForward { mut tape, output } = forward;
    let (loss, _) = block
        .head_mut()
        .loss(&mut tape, &output, labels, Pass::TRAIN)?;
    let value = scalar_value(&loss)?;
    if lambda2 != 0.0 {
        let grads = backward(&tape, &loss)?;
        drop((tape, output, loss));
        apply_gradients(block.params_mut(), &grads, lambda2, velocities, cfg, lr)?;
    }
    Ok(value)
}

/// Output-layer loss on the detached final block output and one SGD step
/// of the output layer with `lambda1 · ∇loss`. Returns the loss and the
/// number of correct predictions.
pub fn global_update<T: Scalar>(
    classifier: &mut Head<T>,
    input: Arc<Tensor<T>>,
    labels: &[usize],
    lambda1: f64,
    cfg: &SgdConfig,
    lr: f64,
    velocities: &mut Velocities<T>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let (loss, probs) = classifier.loss(&mut tape, &Var::from_arc(input), labels, Pass::TRAIN)?;
    let correct = count_correct(&probs, labels);
    let value = scalar_value(&loss)?;
    if lambda1 != 0.0 {
        let grads = backward(&tape, &loss)?;
        drop((tape, loss));
        apply_gradients(
            classifier.params_mut(),
            &grads,
            lambda1,
            velocities,
            cfg,
            lr,
        )?;
    }
    Ok((value, correct))
}

fn count_correct<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(probs)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

fn check_batch<T: Scalar>(images: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if images.shape().first() != Some(&labels.len()) || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "batch of shape {:?} with {} labels",
            images.shape(),
            labels.len()
        )));
    }
    Ok(())
}

/// One block-wise step: every block learns from its own head on a detached
/// input, and the output layer learns from the detached last block output.
pub fn bwbpf_step<T: Scalar>(
    model: &mut DecoupledModel<T>,
    images: Tensor<T>,
    labels: &[usize],
    weights: LossWeights,
    cfg: &SgdConfig,
    state: &mut TrainState<T>,
) -> Result<StepMetrics> {
    check_batch(&images, labels)?;
    let lr = state.lr(cfg);
    let mut h = Arc::new(images);
    let mut local_losses = Vec::with_capacity(model.k());
    for block in model.blocks_mut() {
        let fwd = block_forward(block, h)?;
        h = fwd.output();
        local_losses.push(local_update(
            block,
            fwd,
            labels,
            weights.lambda2,
            cfg,
            lr,
            &mut state.velocities,
        )?);
    }
    let (global_loss, correct) = global_update(
        model.classifier_mut(),
        h,
        labels,
        weights.lambda1,
        cfg,
        lr,
        &mut state.velocities,
    )?;
    Ok(state.finish_step(
        lr,
        global_loss,
        local_losses,
        weights,
        correct,
        labels.len(),
    ))
}

impl<T: Scalar> TrainState<T> {
    pub(crate) fn finish_step(
        &mut self,
        lr: f64,
        global_loss: f64,
        local_losses: Vec<f64>,
        weights: LossWeights,
        correct: usize,
        count: usize,
    ) -> StepMetrics {
        let metrics = StepMetrics {
            step: self.step,
            epoch: self.epoch,
            lr,
            global_loss,
            total: weighted_total(weights, global_loss, &local_losses),
            local_losses,
            correct,
            count,
        };
        self.step += 1;
        self.log.push(metrics.clone());
        metrics
    }
}

/// One end-to-end backpropagation step on the global loss.
pub fn bp_step<T: Scalar>(
    net: &mut Network<T>,
    images: Tensor<T>,
    labels: &[usize],
    cfg: &SgdConfig,
    state: &mut TrainState<T>,
) -> Result<StepMetrics> {
    check_batch(&images, labels)?;
    let lr = state.lr(cfg);
    let mut tape = Tape::new();
    let logits = net.forward(&mut tape, &Var::constant(images), Pass::TRAIN)?;
    let (loss, probs) = softmax_cross_entropy(&mut tape, &logits, labels)?;
    let value = scalar_value(&loss)?;
    let grads = backward(&tape, &loss)?;
    drop((tape, logits, loss));
    apply_gradients(
        net.params_mut(),
        &grads,
        1.0,
        &mut state.velocities,
        cfg,
        lr,
    )?;
    let correct = count_correct(&probs, labels);
    Ok(state.finish_step(
        lr,
        value,
        Vec::new(),
        LossWeights::default(),
        correct,
        labels.len(),
    ))
}

/// Every loss term of one forward pass recorded on a single tape, blocks
/// joined by detach. Useful to inspect which parameters each term reaches.
pub struct LossTerms<T> {
    pub locals: Vec<Var<T>>,
    pub global: Var<T>,
}

pub fn loss_terms<T: Scalar>(
    model: &mut DecoupledModel<T>,
    tape: &mut Tape<T>,
    images: Tensor<T>,
    labels: &[usize],
) -> Result<LossTerms<T>> {
    check_batch(&images, labels)?;
    let mut h = Var::constant(images);
    let mut locals = Vec::with_capacity(model.k());
    for block in model.blocks_mut() {
        let out = block.forward(tape, &h, Pass::TRAIN)?;
        locals.push(block.head_mut().loss(tape, &out, labels, Pass::TRAIN)?.0);
        h = out.detach();
    }
    let global = model
        .classifier_mut()
        .loss(tape, &h, labels, Pass::TRAIN)?
        .0;
    Ok(LossTerms { locals, global })
}
