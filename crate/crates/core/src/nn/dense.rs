use std::sync::Arc;

use crate::autodiff::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_tn, Scalar, Tensor};

struct DenseRule<T> {
    x: Arc<Tensor<T>>,
    weight: Arc<Tensor<T>>,
}

impl<T: Scalar> BackwardRule<T> for DenseRule<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (b, f) = (self.x.shape()[0], self.x.shape()[1]);
        let n = self.weight.shape()[0];
        let g = grad.data();
        let dx = if needs[0] {
            let mut dx = vec![T::zero(); b * f];
            gemm_nn(g, self.weight.data(), &mut dx, b, n, f);
            Some(Tensor::new(vec![b, f], dx)?)
        } else {
            None
        };
        let dw = if needs[1] {
            let mut dw = vec![T::zero(); n * f];
            gemm_tn(g, self.x.data(), &mut dw, n, b, f);
            Some(Tensor::new(vec![n, f], dw)?)
        } else {
            None
        };
        let db = needs[2]
            .then(|| grad.reduce(crate::tensor::ReduceOp::Sum, &[0]))
            .transpose()?;
        Ok(vec![dx, dw, db])
    }
}

/// `x[B,F] · weight[N,F]ᵀ + bias[N]`.
pub fn dense<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    weight: &Var<T>,
    bias: &Var<T>,
) -> Result<Var<T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bias.shape() != [ws[0]] {
        return Err(Error::ShapeMismatch {
            op: "dense",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let mut y = x.value().matmul_nt(weight.value())?;
    y.add_channel_bias(bias.value())?;
    let rule = DenseRule {
        x: Arc::clone(x.value_arc()),
        weight: Arc::clone(weight.value_arc()),
    };
    tape.record(y, &[x, weight, bias], rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};
    use crate::rng::Rng;

    fn c(shape: &[usize], v: &[f64]) -> Var<f64> {
        Var::constant(Tensor::from_f64(shape, v).unwrap())
    }

    #[test]
    fn identity_weights() {
        let mut tape = Tape::new();
        let x = c(&[2, 2], &[1., -2., 3., 4.]);
        let y = dense(
            &mut tape,
            &x,
            &c(&[2, 2], &[1., 0., 0., 1.]),
            &c(&[2], &[0., 0.]),
        )
        .unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn hand_computed_output() {
        let mut tape = Tape::new();
        let y = dense(
            &mut tape,
            &c(&[1, 2], &[1., 2.]),
            &c(&[2, 2], &[1., 1., 0., 1.]),
            &c(&[2], &[0.5, 0.5]),
        )
        .unwrap();
        assert_eq!(y.value().data(), &[3.5, 2.5]);
    }

    #[test]
    fn shape_mismatch() {
        let mut tape = Tape::new();
        let r = dense(
            &mut tape,
            &c(&[1, 3], &[1., 2., 3.]),
            &c(&[2, 2], &[0.; 4]),
            &c(&[2], &[0.; 2]),
        );
        assert!(r.is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(4);
        let x: Tensor<f64> = rng.normal(&[3, 4], 0.0, 1.0).unwrap();
        let w: Tensor<f64> = rng.normal(&[2, 4], 0.0, 1.0).unwrap();
        let b: Tensor<f64> = rng.normal(&[2], 0.0, 1.0).unwrap();
        let report = grad_check(
            |tape, p| {
                let y = dense(tape, &p[0], &p[1], &p[2])?;
                let y = tape.mul(&y, &y)?;
                tape.sum(&y)
            },
            &[x, w, b],
            &GradCheckConfig::default(),
        );
        assert!(report.passed, "{report:?}");
    }
}
