//! Dense row-major tensors.
//!
//! Every kernel here accumulates in a fixed order (row-major, inner index
//! ascending), so repeated evaluation is bitwise reproducible and two
//! executors that call the same kernels on the same inputs agree exactly.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training runs) and
/// `f64` (gradient verification).
pub trait Scalar:
    Float + FromPrimitive + Default + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const NAME: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(
                f,
                "{:?}..(+{})",
                &self.data[..PREVIEW],
                self.data.len() - PREVIEW
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    /// Builds a tensor from `f64` values, rounding into `T`.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::NonScalarLoss(self.shape.clone())),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn elementwise(&self, op: ElementwiseOp, other: &Self) -> Result<Self> {
        match op {
            ElementwiseOp::Add => self.zip_map(other, "add", |a, b| a + b),
            ElementwiseOp::Sub => self.zip_map(other, "sub", |a, b| a - b),
            ElementwiseOp::Mul => self.zip_map(other, "mul", |a, b| a * b),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(ElementwiseOp::Add, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(ElementwiseOp::Sub, other)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(ElementwiseOp::Mul, other)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn add_channel_bias(&mut self, bias: &Self) -> Result<()> {
        if self.rank() < 2 || bias.rank() != 1 || bias.shape[0] != self.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let channels = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        for (i, chunk) in self.data.chunks_mut(inner).enumerate() {
            let b = bias.data[i % channels];
            for v in chunk {
                *v = *v + b;
            }
        }
        Ok(())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean_all(&self) -> Result<T> {
        if self.data.is_empty() {
            return Err(Error::EmptyReduction { op: "mean" });
        }
        Ok(self.sum_all() / T::of(self.data.len() as f64))
    }

    /// Reduces over `axes`, removing them from the shape. Elements are
    /// visited in increasing flat order, so accumulation is left to right.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count: usize = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        if count == 0 && op != ReduceOp::Sum {
            return Err(Error::EmptyReduction {
                op: match op {
                    ReduceOp::Mean => "mean",
                    _ => "max",
                },
            });
        }

        let out_len = numel(&out_shape);
        let mut acc: Vec<Option<T>> = vec![None; out_len];
        let mut index = vec![0usize; rank];
        for &v in &self.data {
            let mut o = 0;
            for d in 0..rank {
                if !reduced[d] {
                    o = o * self.shape[d] + index[d];
                }
            }
            acc[o] = Some(match (acc[o], op) {
                (None, _) => v,
                (Some(a), ReduceOp::Max) => {
                    if v > a {
                        v
                    } else {
                        a
                    }
                }
                (Some(a), _) => a + v,
            });
            for d in (0..rank).rev() {
                index[d] += 1;
                if index[d] < self.shape[d] {
                    break;
                }
                index[d] = 0;
            }
        }
        let scale = T::of(count as f64);
        let data = acc
            .into_iter()
            .map(|a| {
                let a = a.unwrap_or_else(T::zero);
                if op == ReduceOp::Mean {
                    a / scale
                } else {
                    a
                }
            })
            .collect();
        Self::new(out_shape, data)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = self.matmul_dims(other, false, false)?;
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = self.matmul_dims(other, true, false)?;
        let mut out = vec![T::zero(); m * n];
        gemm_tn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = self.matmul_dims(other, false, true)?;
        let mut out = vec![T::zero(); m * n];
        gemm_nt(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    fn matmul_dims(&self, other: &Self, ta: bool, tb: bool) -> Result<(usize, usize, usize)> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        };
        if self.rank() != 2 || other.rank() != 2 {
            return Err(mismatch());
        }
        let (m, ka) = if ta {
            (self.shape[1], self.shape[0])
        } else {
            (self.shape[0], self.shape[1])
        };
        let (kb, n) = if tb {
            (other.shape[1], other.shape[0])
        } else {
            (other.shape[0], other.shape[1])
        };
        if ka != kb {
            return Err(mismatch());
        }
        Ok((m, ka, n))
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose of rank-{} tensor",
                self.rank()
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        transpose_into(&self.data, &mut out, r, c);
        Self::new(vec![c, r], out)
    }

    /// Returns an error naming the first non-finite element.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite {
                what: what.to_string(),
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Bitwise equality, treating NaN payloads and signed zeros as distinct.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`, inner loop over `n` (axpy form).
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let s = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + s * bv;
            }
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let s = a[kk * m + i];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + s * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`, computed as `a · transpose(b)`.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let mut bt = vec![T::zero(); k * n];
    transpose_into(b, &mut bt, n, k);
    gemm_nn(a, &bt, out, m, k, n);
}

pub fn transpose_into<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}
