use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// `c = a·b + beta·c` for strided row-major operands.
///
/// Strides are `(row, col)`; passing `(1, k)` for a `n×k` buffer reads it
/// transposed without a copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis, or a configuration error
/// when the kernel does not fit.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("convolution stride must be positive"));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::config(format!(
            "kernel extent {kernel} does not fit padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (&[c_in, h, w], &[c_out, kc, kh, kw]) = (input.shape(), kernels.shape()) else {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: kernels.shape().to_vec(),
            });
        };
        if kc != c_in {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: kernels.shape().to_vec(),
            });
        }
        let oh = conv_output_extent(h, kh, stride, padding)?;
        let ow = conv_output_extent(w, kw, stride, padding)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(col_row, position, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.oh {
                        let y = oy as isize * s + ki as isize - p;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let x = ox as isize * s + kj as isize - p;
                            if x < 0 || x >= self.w as isize {
                                continue;
                            }
                            let src = (c * self.h + y as usize) * self.w + x as usize;
                            f(row, oy * self.ow + ox, src);
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n = self.positions();
        let mut cols = vec![0.0; self.patch_len() * n];
        self.for_each_tap(|row, pos, src| cols[row * n + pos] = input[src]);
        cols
    }

    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.positions();
        let mut out = vec![0.0; self.c_in * self.h * self.w];
        self.for_each_tap(|row, pos, src| out[src] += cols[row * n + pos]);
        out
    }

    /// Returns (d_input, d_kernels) given the upstream gradient and cached
    /// columns.
    pub fn backward(&self, grad: &[f64], kernels: &[f64], cols: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (o, pl, n) = (self.c_out, self.patch_len(), self.positions());
        let mut dk = vec![0.0; o * pl];
        gemm(o, n, pl, grad, (n, 1), cols, (1, n), &mut dk, 0.0);
        let mut dcols = vec![0.0; pl * n];
        gemm(pl, o, n, kernels, (1, pl), grad, (n, 1), &mut dcols, 0.0);
        (self.col2im(&dcols), dk)
    }
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<f64>)> {
    let g = ConvGeometry::new(input, kernels, stride, padding)?;
    let cols = g.im2col(input.data());
    let (o, pl, n) = (g.c_out, g.patch_len(), g.positions());
    let mut out = vec![0.0; o * n];
    gemm(o, pl, n, kernels.data(), (pl, 1), &cols, (n, 1), &mut out, 0.0);
    Ok((Tensor::new(&[o, g.oh, g.ow], out)?, cols))
}

/// Source sample for one output coordinate under corner alignment:
/// `(lower index, upper index, fractional weight of upper)`.
fn corner_aligned(i: usize, n_out: usize, n_in: usize) -> (usize, usize, f64) {
    if n_out == 1 || n_in == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
    let lo = (pos.floor() as usize).min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, pos - lo as f64)
}

/// Calls `f(out_index, in_index, weight)` for the four taps of every output
/// pixel.
pub(crate) fn bilinear_taps(
    (c, h, w): (usize, usize, usize),
    (h2, w2): (usize, usize),
    mut f: impl FnMut(usize, usize, f64),
) {
    let xs: Vec<_> = (0..w2).map(|x| corner_aligned(x, w2, w)).collect();
    for ch in 0..c {
        for y in 0..h2 {
            let (y0, y1, fy) = corner_aligned(y, h2, h);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let out = (ch * h2 + y) * w2 + x;
                let base = ch * h * w;
                f(out, base + y0 * w + x0, (1.0 - fy) * (1.0 - fx));
                f(out, base + y0 * w + x1, (1.0 - fy) * fx);
                f(out, base + y1 * w + x0, fy * (1.0 - fx));
                f(out, base + y1 * w + x1, fy * fx);
            }
        }
    }
}

pub(crate) fn resize_dims(input: &Tensor, height: usize, width: usize) -> Result<(usize, usize, usize)> {
    if height == 0 || width == 0 {
        return Err(Error::config("resize target extents must be at least 1"));
    }
    match *input.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::Dimension {
            op: "bilinear_resize",
            lhs: input.shape().to_vec(),
            rhs: vec![height, width],
        }),
    }
}

pub(crate) fn bilinear_resize(input: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (c, h, w) = resize_dims(input, height, width)?;
    if (h, w) == (height, width) {
        return Ok(input.clone());
    }
    let mut out = vec![0.0; c * height * width];
    let src = input.data();
    bilinear_taps((c, h, w), (height, width), |o, i, wt| out[o] += wt * src[i]);
    Tensor::new(&[c, height, width], out)
}

/// Elementwise and axis-normalized activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softmax,
    /// `x·σ(x)`, the EfficientNet nonlinearity.
    Swish,
    /// Tanh-approximated GELU used inside transformer MLPs.
    Gelu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "softmax" => Ok(Self::Softmax),
            "swish" => Ok(Self::Swish),
            "gelu" => Ok(Self::Gelu),
            other => Err(Error::config(format!("unknown activation {other:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Softmax => "softmax",
            Self::Swish => "swish",
            Self::Gelu => "gelu",
        };
        f.write_str(name)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn activation(x: &Tensor, kind: Activation, axis: Option<usize>) -> Result<Tensor> {
    Ok(match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Swish => x.map(|v| v * sigmoid(v)),
        Activation::Gelu => x.map(gelu),
        Activation::Softmax => {
            let axis = axis.ok_or_else(|| Error::config("softmax requires an axis"))?;
            softmax_axis(x, axis)?
        }
    })
}

/// Numerically stable softmax along an arbitrary axis.
pub(crate) fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::config(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let max = (0..extent).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..extent {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..extent {
                out[idx(k)] /= total;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Inverted-dropout multiplier mask, or `None` when dropout is a no-op.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(
    shape: &[usize],
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Option<Tensor>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok(Some(Tensor::new(shape, data)?))
}
