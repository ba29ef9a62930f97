use serde::{Deserialize, Serialize};

use crate::arch::{DecoupledModel, Network};
use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Pass};
use crate::tensor::{Scalar, Tensor};

/// Output-layer logits in evaluation mode.
pub trait Predictor<T: Scalar> {
    fn logits(&mut self, images: Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Predictor<T> for Network<T> {
    fn logits(&mut self, images: Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(&mut Tape::new(), &Var::constant(images), Pass::EVAL)?;
        Ok(out.value().clone())
    }
}

/// Auxiliary heads are never consulted.
impl<T: Scalar> Predictor<T> for DecoupledModel<T> {
    fn logits(&mut self, images: Tensor<T>) -> Result<Tensor<T>> {
        let out = self.forward(&mut Tape::new(), &Var::constant(images), Pass::EVAL)?;
        Ok(out.value().clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// `1 − correct / total`.
    pub error: f64,
}

/// Fraction of mismatched predictions.
pub fn error_rate(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(1.0 - correct as f64 / labels.len() as f64)
}

/// Error rate of `model` over `data`, in order, `batch_size` at a time.
pub fn evaluate<T: Scalar, M: Predictor<T>>(
    model: &mut M,
    data: &Dataset,
    batch_size: usize,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch_size = batch_size.max(1);
    let mut predictions = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, _) = data.batch::<T>(chunk)?;
        predictions.extend(argmax_rows(&model.logits(x)?));
    }
    let labels = data.labels();
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(Evaluation {
        correct,
        total: labels.len(),
        error: error_rate(&predictions, labels)?,
    })
}
