use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Valid,
    /// Zero padding of `(k - 1) / 2` on each side.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dGeometry {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Same => (self.kernel - 1) / 2,
        }
    }

    /// Output spatial extent for an input extent, or `None` when the kernel
    /// does not fit the padded input.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad();
        if self.stride == 0 || self.kernel == 0 || self.kernel > padded {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

struct Dims {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Dims {
    fn patch(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], d: &Dims, cols: &mut [T]) {
    let p = d.positions();
    for c in 0..d.in_ch {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let y = (oy * d.stride + ki) as isize - d.pad as isize;
                    for ox in 0..d.ow {
                        let xx = (ox * d.stride + kj) as isize - d.pad as isize;
                        out[oy * d.ow + ox] =
                            if y >= 0 && (y as usize) < d.h && xx >= 0 && (xx as usize) < d.w {
                                plane[y as usize * d.w + xx as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: &Dims, dx: &mut [T]) {
    let p = d.positions();
    for c in 0..d.in_ch {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let y = (oy * d.stride + ki) as isize - d.pad as isize;
                    if y < 0 || y as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let xx = (ox * d.stride + kj) as isize - d.pad as isize;
                        if xx >= 0 && (xx as usize) < d.w {
                            let i = y as usize * d.w + xx as usize;
                            plane[i] = plane[i] + src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dRule<T> {
    dims: Dims,
    cols: Vec<T>,
    weight: Arc<Tensor<T>>,
    in_shape: Vec<usize>,
    has_bias: bool,
}

impl<T: Scalar> BackwardRule<T> for Conv2dRule<T> {
    fn backward(&self, grad: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let d = &self.dims;
        let (ck, p) = (d.patch(), d.positions());
        let g = grad.data();
        let w = self.weight.data();

        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); d.batch * d.in_ch * d.h * d.w];
            let mut dcols = vec![T::zero(); ck * p];
            for b in 0..d.batch {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                let gb = &g[b * d.out_ch * p..(b + 1) * d.out_ch * p];
                gemm_tn(w, gb, &mut dcols, ck, d.out_ch, p);
                let xb = &mut dx[b * d.in_ch * d.h * d.w..(b + 1) * d.in_ch * d.h * d.w];
                col2im(&dcols, d, xb);
            }
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); d.out_ch * ck];
            for b in 0..d.batch {
                let gb = &g[b * d.out_ch * p..(b + 1) * d.out_ch * p];
                let cb = &self.cols[b * ck * p..(b + 1) * ck * p];
                gemm_nt(gb, cb, &mut dw, d.out_ch, p, ck);
            }
            dw
        });
        let db = (self.has_bias && needs.get(2).copied().unwrap_or(false)).then(|| {
            let mut db = vec![T::zero(); d.out_ch];
            for b in 0..d.batch {
                for (o, acc) in db.iter_mut().enumerate() {
                    let start = (b * d.out_ch + o) * p;
                    *acc = g[start..start + p].iter().fold(*acc, |s, &v| s + v);
                }
            }
            db
        });

        let mut out = vec![
            dx.map(|v| Tensor::new(self.in_shape.clone(), v))
                .transpose()?,
            dw.map(|v| Tensor::new(self.weight.shape().to_vec(), v))
                .transpose()?,
        ];
        if self.has_bias {
            out.push(db.map(|v| Tensor::new(vec![d.out_ch], v)).transpose()?);
        }
        Ok(out)
    }
}

/// Direct 2-D convolution (cross-correlation, no kernel flip) of
/// `x[B,C,H,W]` with `weight[O,C,k,k]`, via im2col.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    geom: Conv2dGeometry,
) -> Result<Var<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] != geom.kernel {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [ws[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: ws.to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let (oh, ow) = match (geom.output_extent(xs[2]), geom.output_extent(xs[3])) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {} (stride {}, pad {}) larger than input {}x{}",
                geom.kernel,
                geom.stride,
                geom.pad(),
                xs[2],
                xs[3]
            )))
        }
    };
    let d = Dims {
        batch: xs[0],
        in_ch: xs[1],
        h: xs[2],
        w: xs[3],
        out_ch: ws[0],
        oh,
        ow,
        k: geom.kernel,
        stride: geom.stride,
        pad: geom.pad(),
    };
    let (ck, p) = (d.patch(), d.positions());
    let xd = x.value().data();
    let wd = weight.value().data();
    let mut cols = vec![T::zero(); d.batch * ck * p];
    let mut out = vec![T::zero(); d.batch * d.out_ch * p];
    for b in 0..d.batch {
        let cb = &mut cols[b * ck * p..(b + 1) * ck * p];
        im2col(
            &xd[b * d.in_ch * d.h * d.w..(b + 1) * d.in_ch * d.h * d.w],
            &d,
            cb,
        );
        let ob = &mut out[b * d.out_ch * p..(b + 1) * d.out_ch * p];
        gemm_nn(wd, cb, ob, d.out_ch, ck, p);
    }
    let mut y = Tensor::new(vec![d.batch, d.out_ch, oh, ow], out)?;
    if let Some(b) = bias {
        y.add_channel_bias(b.value())?;
    }

    let rule = Conv2dRule {
        in_shape: xs.to_vec(),
        weight: Arc::clone(weight.value_arc()),
        cols: if weight.requires_grad() {
            cols
        } else {
            Vec::new()
        },
        dims: d,
        has_bias: bias.is_some(),
    };
    match bias {
        Some(b) => tape.record(y, &[x, weight, b], rule),
        None => tape.record(y, &[x, weight], rule),
    }
}
