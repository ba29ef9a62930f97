use crate::autodiff::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct MaxPoolRule {
    in_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl<T: Scalar> BackwardRule<T> for MaxPoolRule {
    fn backward(&self, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = Tensor::zeros(&self.in_shape);
        let d = dx.data_mut();
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            d[src] = d[src] + g;
        }
        Ok(vec![Some(dx)])
    }
}

/// Max pooling without padding. Ties go to the lowest flat index.
pub fn maxpool2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    kernel: usize,
    stride: usize,
) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 || kernel == 0 || stride == 0 || kernel > s[2] || kernel > s[3] {
        return Err(Error::InvalidArgument(format!(
            "maxpool kernel {kernel} stride {stride} on input {s:?}"
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let xd = x.value().data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..kernel {
                    for j in 0..kernel {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let y = Tensor::new(vec![b, c, oh, ow], out)?;
    let rule = MaxPoolRule {
        in_shape: s.to_vec(),
        argmax,
    };
    tape.record(y, &[x], rule)
}

struct GapRule {
    in_shape: Vec<usize>,
}

impl<T: Scalar> BackwardRule<T> for GapRule {
    fn backward(&self, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let hw = self.in_shape[2] * self.in_shape[3];
        let scale = T::of(hw as f64);
        let mut dx = Vec::with_capacity(grad.len() * hw);
        for &g in grad.data() {
            let v = g / scale;
            dx.extend(std::iter::repeat_n(v, hw));
        }
        Ok(vec![Some(Tensor::new(self.in_shape.clone(), dx)?)])
    }
}

/// Global average pooling `[B,C,H,W] → [B,C]`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] * s[3] == 0 {
        return Err(Error::InvalidArgument(format!(
            "global average pool on {s:?}"
        )));
    }
    let hw = s[2] * s[3];
    let scale = T::of(hw as f64);
    let data = x
        .value()
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / scale)
        .collect();
    let y = Tensor::new(vec![s[0], s[1]], data)?;
    tape.record(
        y,
        &[x],
        GapRule {
            in_shape: s.to_vec(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{backward, grad_check, GradCheckConfig};
    use crate::rng::Rng;

    #[test]
    fn maxpool_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let y = maxpool2d(&mut tape, &x, 2, 2).unwrap();
        assert_eq!(y.value().data(), &[4.0]);
        let loss = tape.sum(&y).unwrap();
        let g = backward(&tape, &loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn maxpool_tie_goes_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::full(&[1, 1, 2, 2], 5.0));
        let y = maxpool2d(&mut tape, &x, 2, 2).unwrap();
        let loss = tape.sum(&y).unwrap();
        let g = backward(&tape, &loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn gap_of_constant() {
        let x = Var::constant(Tensor::<f64>::full(&[2, 3, 4, 4], 1.75));
        let y = global_avg_pool(&mut Tape::new(), &x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.value().data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn residual_add_identity() {
        let x = Var::constant(Rng::new(1).normal::<f64>(&[1, 2, 2, 2], 0.0, 1.0).unwrap());
        let z = Var::constant(Tensor::zeros(&[1, 2, 2, 2]));
        let y = Tape::new().add(&x, &z).unwrap();
        assert_eq!(y.value(), x.value());
        assert!(Tape::new()
            .add(&x, &Var::constant(Tensor::zeros(&[1, 2, 2, 1])))
            .is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(31);
        let x: Tensor<f64> = rng.normal(&[2, 2, 5, 5], 0.0, 1.0).unwrap();
        let probe: Tensor<f64> = rng.normal(&[2, 2], 0.0, 1.0).unwrap();
        let report = grad_check(
            |tape, p| {
                let y = maxpool2d(tape, &p[0], 2, 2)?;
                let y = tape.relu(&y)?;
                let y = global_avg_pool(tape, &y)?;
                let y = tape.mul(&y, &Var::constant(probe.clone()))?;
                tape.sum(&y)
            },
            &[x],
            &GradCheckConfig::default(),
        );
        assert!(report.passed, "{report:?}");
    }
}
