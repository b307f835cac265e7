//! Dense `f64` arrays, their forward kernels, and a reverse-mode tape.
//!
//! [`Tensor`] is a plain value: a shape and a row-major buffer. Kernels on it
//! (`matmul`, `conv2d`, `bilinear_resize`, activations, dropout) are used both
//! directly and as the forward half of every [`Tape`] operation, so anything
//! computed on a tape is bit-identical to the same computation done by hand
//! with these methods.

mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use kernels::{conv_output_extent, Activation};
pub use params::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};
pub(crate) use kernels::sigmoid as sigmoid_value;
pub(crate) use tape::bce_value;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// An n-dimensional array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A 1-D tensor owning `data`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::input("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Zero-mean Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(rng))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows and columns of a 2-D tensor; a 1-D tensor reads as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [n] => Ok((1, n)),
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension {
                op: "dims2",
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row() on scalar");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2_strict("matmul", other)?;
        let (k2, n) = other.dims2_strict("matmul", self)?;
        if k != k2 {
            return Err(self.mismatch("matmul", other));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, 0.0);
        Self::new(&[m, n], out)
    }

    /// `self · otherᵀ`, the product used by every dense projection.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2_strict("matmul_t", self)?;
        if k != k2 {
            return Err(self.mismatch("matmul_t", other));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, &self.data, (k, 1), &other.data, (1, k), &mut out, 0.0);
        let shape = if self.ndim() == 1 { vec![n] } else { vec![m, n] };
        Self::new(&shape, out)
    }

    /// 2-D cross-correlation of a `C_in×H×W` input with `C_out×C_in×kh×kw`
    /// kernels.
    pub fn conv2d(&self, kernels: &Self, stride: usize, padding: usize) -> Result<Self> {
        kernels::conv2d_forward(self, kernels, stride, padding).map(|(out, _)| out)
    }

    /// Corner-aligned bilinear resampling of a `C×H×W` tensor.
    pub fn bilinear_resize(&self, height: usize, width: usize) -> Result<Self> {
        kernels::bilinear_resize(self, height, width)
    }

    /// Applies an activation; `axis` is required for softmax and ignored
    /// otherwise.
    pub fn activation(&self, kind: Activation, axis: Option<usize>) -> Result<Self> {
        kernels::activation(self, kind, axis)
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        kernels::softmax_axis(self, axis)
    }

    /// Inverted dropout. In training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`; otherwise identity.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, training: bool, rng: &mut R) -> Result<Self> {
        let mask = kernels::dropout_mask(self.shape(), rate, training, rng)?;
        match mask {
            Some(mask) => self.zip_map(&mask, "dropout", |a, m| a * m),
            None => Ok(self.clone()),
        }
    }

    fn dims2_strict(&self, op: &'static str, other: &Self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            [n] if op == "matmul_t" => Ok((1, n)),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }),
        }
    }

    fn mismatch(&self, op: &'static str, other: &Self) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        }
    }
}
