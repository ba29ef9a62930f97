//! Elementary differentiable operations.

use std::sync::Arc;

use super::{BackwardRule, Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

struct AddRule;

impl<T: Scalar> BackwardRule<T> for AddRule {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(needs.iter().map(|&n| n.then(|| grad.clone())).collect())
    }
}

struct SubRule;

impl<T: Scalar> BackwardRule<T> for SubRule {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.map(|v| -v)),
        ])
    }
}

struct MulRule<T> {
    a: Arc<Tensor<T>>,
    b: Arc<Tensor<T>>,
}

impl<T: Scalar> BackwardRule<T> for MulRule<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![
            if needs[0] {
                Some(grad.mul(&self.b)?)
            } else {
                None
            },
            if needs[1] {
                Some(grad.mul(&self.a)?)
            } else {
                None
            },
        ])
    }
}

struct ScaleRule<T>(T);

impl<T: Scalar> BackwardRule<T> for ScaleRule<T> {
    fn backward(&self, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.scale(self.0))])
    }
}

/// Keeps only the activation mask.
pub(crate) struct ReluRule {
    pub(crate) mask: Vec<bool>,
}

impl<T: Scalar> BackwardRule<T> for ReluRule {
    fn backward(&self, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = grad.clone();
        for (v, &on) in g.data_mut().iter_mut().zip(&self.mask) {
            if !on {
                *v = T::zero();
            }
        }
        Ok(vec![Some(g)])
    }
}

struct MatMulRule<T> {
    a: Arc<Tensor<T>>,
    b: Arc<Tensor<T>>,
}

impl<T: Scalar> BackwardRule<T> for MatMulRule<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![
            if needs[0] {
                Some(grad.matmul_nt(&self.b)?)
            } else {
                None
            },
            if needs[1] {
                Some(self.a.matmul_tn(grad)?)
            } else {
                None
            },
        ])
    }
}

struct BroadcastRule {
    shape: Vec<usize>,
    divisor: Option<usize>,
}

impl<T: Scalar> BackwardRule<T> for BroadcastRule {
    fn backward(&self, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = grad.item()?;
        if let Some(n) = self.divisor {
            g = g / T::of(n as f64);
        }
        Ok(vec![Some(Tensor::full(&self.shape, g))])
    }
}

struct ReshapeRule {
    shape: Vec<usize>,
}

impl<T: Scalar> BackwardRule<T> for ReshapeRule {
    fn backward(&self, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.reshape(&self.shape)?)])
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let v = a.value().add(b.value())?;
        self.record(v, &[a, b], AddRule)
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let v = a.value().sub(b.value())?;
        self.record(v, &[a, b], SubRule)
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let v = a.value().mul(b.value())?;
        let rule = MulRule {
            a: Arc::clone(a.value_arc()),
            b: Arc::clone(b.value_arc()),
        };
        self.record(v, &[a, b], rule)
    }

    pub fn scale(&mut self, a: &Var<T>, factor: T) -> Result<Var<T>> {
        self.record(a.value().scale(factor), &[a], ScaleRule(factor))
    }

    pub fn relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let mask = x.value().data().iter().map(|&v| v > T::zero()).collect();
        self.record(x.value().relu(), &[x], ReluRule { mask })
    }

    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let v = a.value().matmul(b.value())?;
        let rule = MatMulRule {
            a: Arc::clone(a.value_arc()),
            b: Arc::clone(b.value_arc()),
        };
        self.record(v, &[a, b], rule)
    }

    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let rule = BroadcastRule {
            shape: x.shape().to_vec(),
            divisor: None,
        };
        self.record(Tensor::scalar(x.value().sum_all()), &[x], rule)
    }

    pub fn mean(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let rule = BroadcastRule {
            shape: x.shape().to_vec(),
            divisor: Some(x.value().len()),
        };
        self.record(Tensor::scalar(x.value().mean_all()?), &[x], rule)
    }

    pub fn reshape(&mut self, x: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let rule = ReshapeRule {
            shape: x.shape().to_vec(),
        };
        self.record(x.value().reshape(shape)?, &[x], rule)
    }
}
