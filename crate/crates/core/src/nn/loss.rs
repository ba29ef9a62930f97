use crate::autodiff::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct SoftmaxCeRule<T> {
    probs: Tensor<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> BackwardRule<T> for SoftmaxCeRule<T> {
    fn backward(&self, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (b, n) = (self.probs.shape()[0], self.probs.shape()[1]);
        let scale = grad.item()? / T::of(b as f64);
        let mut g = self.probs.clone();
        let d = g.data_mut();
        for (row, &label) in self.labels.iter().enumerate() {
            d[row * n + label] = d[row * n + label] - T::one();
        }
        for v in d.iter_mut() {
            *v = *v * scale;
        }
        Ok(vec![Some(g)])
    }
}

/// Softmax cross-entropy averaged over the batch, computed in log-sum-exp
/// form. Also returns the softmax probabilities (the output vector the loss
/// compares against the labels).
pub fn softmax_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &Var<T>,
    labels: &[usize],
) -> Result<(Var<T>, Tensor<T>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: s.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (b, n) = (s[0], s[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::LabelOutOfRange { label, classes: n });
    }
    let z = logits.value().data();
    let mut probs = vec![T::zero(); b * n];
    let mut total = T::zero();
    for row in 0..b {
        let zr = &z[row * n..(row + 1) * n];
        let m = zr.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let pr = &mut probs[row * n..(row + 1) * n];
        let mut sum = T::zero();
        for (p, &v) in pr.iter_mut().zip(zr) {
            *p = (v - m).exp();
            sum = sum + *p;
        }
        for p in pr.iter_mut() {
            *p = *p / sum;
        }
        total = total + ((m - zr[labels[row]]) + sum.ln());
    }
    let loss = Tensor::scalar(total / T::of(b as f64));
    let probs = Tensor::new(vec![b, n], probs)?;
    let rule = SoftmaxCeRule {
        probs: probs.clone(),
        labels: labels.to_vec(),
    };
    Ok((tape.record(loss, &[logits], rule)?, probs))
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let n = t.shape().last().copied().unwrap_or(0).max(1);
    t.data()
        .chunks(n)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}
