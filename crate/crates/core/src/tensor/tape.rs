use rand::Rng;

use super::kernels::{self, gelu, gelu_grad, sigmoid, Activation, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x · wᵀ`
    Linear(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Broadcast a length-`n` vector over the rows of an `m×n` matrix.
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Swish(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    AddChannelBias(Var, Var),
    Resize(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    MaskMul(Var, Tensor),
    Focal {
        probs: Var,
        target: Tensor,
        alpha: Vec<f64>,
        gamma: f64,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Values are appended in execution order, so replaying the record backwards
/// visits every node after all of its consumers. Gradients of a value used
/// more than once accumulate additively.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when `var` does
    /// not require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · wᵀ` for `x: m×k` (or a length-`k` vector) and `w: n×k`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).matmul_t(self.value(w))?;
        Ok(self.push(out, Op::Linear(x, w), &[x, w]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, cols) = xv.dims2()?;
        if bv.ndim() != 1 || bv.len() != cols {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let b = bv.data();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(b).for_each(|(o, &bb)| *o += bb);
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// `factor·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, factor: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| factor * v + shift);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Swish(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis of a vector or matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let axis = xv.ndim().checked_sub(1).ok_or_else(|| Error::config("softmax of a scalar"))?;
        let out = kernels::softmax_axis(xv, axis)?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Dispatches on an [`Activation`]; softmax runs over the last axis.
    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        Ok(match kind {
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
            Activation::Swish => self.swish(x),
            Activation::Gelu => self.gelu(x),
            Activation::Softmax => self.softmax(x)?,
        })
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != cols || b.len() != cols {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (out, cols) = kernels::conv2d_forward(self.value(input), self.value(kernels), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
                cols,
            },
            &[input, kernels],
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `C×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let channels = xv.shape().first().copied().unwrap_or(0);
        if xv.ndim() != 3 || bv.len() != channels {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let plane = xv.len() / channels.max(1);
        let mut out = xv.clone();
        for (chunk, &b) in out.data_mut().chunks_mut(plane).zip(bv.data()) {
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    pub fn bilinear_resize(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let out = kernels::bilinear_resize(self.value(x), height, width)?;
        Ok(self.push(out, Op::Resize(x), &[x]))
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns). Parts must share
    /// rank; 1-D parts only concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::input("concat of nothing"))?;
        let ndim = self.value(*first).ndim();
        let bad = |tape: &Self, v: Var| Error::Dimension {
            op: "concat",
            lhs: tape.value(*first).shape().to_vec(),
            rhs: tape.value(v).shape().to_vec(),
        };
        let out = match (ndim, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    if self.value(p).ndim() != 1 {
                        return Err(bad(self, p));
                    }
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let cols = self.value(*first).shape()[1];
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    match *self.value(p).shape() {
                        [r, c] if c == cols => rows += r,
                        _ => return Err(bad(self, p)),
                    }
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(&[rows, cols], data)?
            }
            (2, 1) => {
                let rows = self.value(*first).shape()[0];
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    match *self.value(p).shape() {
                        [r, c] if r == rows => widths.push(c),
                        _ => return Err(bad(self, p)),
                    }
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(&[rows, total], data)?
            }
            _ => {
                return Err(Error::config(format!(
                    "concat axis {axis} unsupported for rank {ndim}"
                )))
            }
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = match (xv.shape(), axis) {
            ([n], 0) if start + len <= *n => Tensor::vector(xv.data()[start..start + len].to_vec()),
            ([r, c], 0) if start + len <= *r => {
                Tensor::new(&[len, *c], xv.data()[start * c..(start + len) * c].to_vec())?
            }
            ([r, c], 1) if start + len <= *c => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..*r {
                    data.extend_from_slice(&xv.row(i)[start..start + len]);
                }
                Tensor::new(&[*r, len], data)?
            }
            _ => {
                return Err(Error::Dimension {
                    op: "slice",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![axis, start, len],
                })
            }
        };
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Row `r` of a matrix as a vector.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        let cols = self.value(x).dims2()?.1;
        let s = self.slice(x, 0, r, 1)?;
        self.reshape(s, &[cols])
    }

    /// `out[i] = x[index[i]]` over the flattened buffer, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::input(format!("gather index {bad} out of range {}", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Inverted dropout; see [`Tensor::dropout`].
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        match kernels::dropout_mask(self.value(x).shape(), rate, training, rng)? {
            None => Ok(x),
            Some(mask) => {
                let out = self.value(x).zip_map(&mask, "dropout", |a, m| a * m)?;
                Ok(self.push(out, Op::MaskMul(x, mask), &[x]))
            }
        }
    }

    /// Summed focal loss `−Σ α_c y_c (1−ŷ_c)^γ log ŷ_c` over the rows of
    /// `probs` (a distribution or a batch of them). `γ = 0` is cross-entropy.
    pub fn focal(&mut self, probs: Var, target: &Tensor, alpha: &[f64], gamma: f64) -> Result<Var> {
        let pv = self.value(probs);
        let (_, classes) = pv.dims2()?;
        if pv.shape() != target.shape() || alpha.len() != classes {
            return Err(Error::Dimension {
                op: "focal",
                lhs: pv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let mut loss = 0.0;
        for (i, (&p, &y)) in pv.data().iter().zip(target.data()).enumerate() {
            if y != 0.0 {
                let q = p.clamp(PROB_FLOOR, 1.0);
                loss -= alpha[i % classes] * y * (1.0 - q).powf(gamma) * q.ln();
            }
        }
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            Op::Focal {
                probs,
                target: target.clone(),
                alpha: alpha.to_vec(),
                gamma,
            },
            &[probs],
        ))
    }

    /// Summed binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn bce(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != target.len() {
            return Err(Error::Dimension {
                op: "bce",
                lhs: pv.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let loss: f64 = pv
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &y)| bce_value(p, y))
            .sum();
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            &[p],
        ))
    }

    /// Reverse-mode pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            // Keep intermediate gradients available for inspection.
            grads[idx] = Some(g);
        }
        // Gradients are only reported for values that require them.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = av.dims2()?;
                let n = bv.dims2()?.1;
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), &mut da, 0.0);
                    self.accumulate(grads, a, Tensor::new(av.shape(), da)?);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), &mut db, 0.0);
                    self.accumulate(grads, b, Tensor::new(bv.shape(), db)?);
                }
            }
            &Op::Linear(x, w) => {
                let (xv, wv) = (self.value(x), self.value(w));
                let (m, k) = xv.dims2()?;
                let n = wv.dims2()?.0;
                if self.wants(x) {
                    let mut dx = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), (n, 1), wv.data(), (k, 1), &mut dx, 0.0);
                    self.accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; n * k];
                    kernels::gemm(n, m, k, g.data(), (1, n), xv.data(), (k, 1), &mut dw, 0.0);
                    self.accumulate(grads, w, Tensor::new(wv.shape(), dw)?);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), "mul", |x, y| x * y)?);
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), "mul", |x, y| x * y)?);
                }
            }
            &Op::AddRow(x, bias) => {
                self.accumulate(grads, x, g.clone());
                if self.wants(bias) {
                    let cols = self.value(bias).len();
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(grads, bias, Tensor::vector(db));
                }
            }
            &Op::Scale(x, factor) => self.accumulate(grads, x, g.map(|v| v * factor)),
            &Op::Sigmoid(x) => {
                let d = g.zip_map(out, "sigmoid", |gv, y| gv * y * (1.0 - y))?;
                self.accumulate(grads, x, d);
            }
            &Op::Tanh(x) => {
                let d = g.zip_map(out, "tanh", |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, x, d);
            }
            &Op::Swish(x) => {
                let d = g.zip_map(self.value(x), "swish", |gv, v| {
                    let s = sigmoid(v);
                    gv * (s + v * s * (1.0 - s))
                })?;
                self.accumulate(grads, x, d);
            }
            &Op::Gelu(x) => {
                let d = g.zip_map(self.value(x), "gelu", |gv, v| gv * gelu_grad(v))?;
                self.accumulate(grads, x, d);
            }
            &Op::SoftmaxRows(x) => {
                let cols = *out.shape().last().expect("softmax rank");
                let mut d = vec![0.0; out.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gv - dot);
                    }
                }
                self.accumulate(grads, x, Tensor::new(out.shape(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = out.dims2()?;
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let gh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = gh.iter().sum();
                        let s2: f64 = gh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let n = cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = inv_std[r] / n * (n * gh[c] - s1 - hr[c] * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(out.shape(), dx)?);
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for (gr, hr) in g.data().chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * hr[c];
                            db[c] += gr[c];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(self.value(*gain).shape(), dg)?);
                    self.accumulate(grads, *bias, Tensor::new(self.value(*bias).shape(), db)?);
                }
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
                cols,
            } => {
                let (iv, kv) = (self.value(*input), self.value(*kernels));
                let geom = ConvGeometry::new(iv, kv, *stride, *padding)?;
                let (di, dk) = geom.backward(g.data(), kv.data(), cols);
                self.accumulate(grads, *input, Tensor::new(iv.shape(), di)?);
                self.accumulate(grads, *kernels, Tensor::new(kv.shape(), dk)?);
            }
            &Op::AddChannelBias(x, bias) => {
                self.accumulate(grads, x, g.clone());
                if self.wants(bias) {
                    let channels = self.value(bias).len();
                    let plane = g.len() / channels;
                    let db = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                    self.accumulate(grads, bias, Tensor::new(self.value(bias).shape(), db)?);
                }
            }
            &Op::Resize(x) => {
                let xv = self.value(x);
                let dims = match *xv.shape() {
                    [c, h, w] => (c, h, w),
                    _ => unreachable!("resize input is 3-D"),
                };
                let (h2, w2) = (out.shape()[1], out.shape()[2]);
                let dx = if (dims.1, dims.2) == (h2, w2) {
                    g.data().to_vec()
                } else {
                    let mut dx = vec![0.0; xv.len()];
                    kernels::bilinear_taps(dims, (h2, w2), |o, i, wt| dx[i] += wt * g.data()[o]);
                    dx
                };
                self.accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
            }
            Op::Concat { parts, axis } => match (out.ndim(), axis) {
                (1, 0) | (2, 0) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let piece = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        self.accumulate(grads, p, Tensor::new(self.value(p).shape(), piece)?);
                    }
                }
                _ => {
                    let (rows, total) = out.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).shape()[1];
                        if self.wants(p) {
                            let mut piece = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                piece.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                            }
                            self.accumulate(grads, p, Tensor::new(&[rows, w], piece)?);
                        }
                        offset += w;
                    }
                }
            },
            &Op::Slice { x, axis, start } => {
                let xv = self.value(x);
                let mut dx = vec![0.0; xv.len()];
                match (xv.ndim(), axis) {
                    (1, 0) => dx[start..start + g.len()].copy_from_slice(g.data()),
                    (2, 0) => {
                        let c = xv.shape()[1];
                        dx[start * c..start * c + g.len()].copy_from_slice(g.data());
                    }
                    _ => {
                        let (r, c) = xv.dims2()?;
                        let len = g.len() / r;
                        for i in 0..r {
                            dx[i * c + start..i * c + start + len]
                                .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    dx[i] += gv;
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape(), dx)?);
            }
            &Op::Transpose(x) => self.accumulate(grads, x, g.transpose()?),
            &Op::Reshape(x) => {
                let shape = self.value(x).shape();
                self.accumulate(grads, x, g.clone().reshape(shape)?);
            }
            &Op::Sum(x) => {
                let xv = self.value(x);
                self.accumulate(grads, x, Tensor::full(xv.shape(), g.item()));
            }
            Op::MaskMul(x, mask) => {
                self.accumulate(grads, *x, g.zip_map(mask, "dropout", |a, m| a * m)?);
            }
            Op::Focal {
                probs,
                target,
                alpha,
                gamma,
            } => {
                let pv = self.value(*probs);
                let classes = alpha.len();
                let upstream = g.item();
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (&p, &y))| {
                        if y == 0.0 || p < PROB_FLOOR {
                            return 0.0;
                        }
                        let a = alpha[i % classes] * y;
                        let q = p.min(1.0);
                        let log_q = q.ln();
                        let modulate = (1.0 - q).powf(*gamma);
                        let focus = if *gamma == 0.0 || log_q == 0.0 {
                            0.0
                        } else {
                            gamma * (1.0 - q).powf(gamma - 1.0) * log_q
                        };
                        upstream * a * (focus - modulate / q)
                    })
                    .collect();
                self.accumulate(grads, *probs, Tensor::new(pv.shape(), d)?);
            }
            Op::Bce { p, target } => {
                let pv = self.value(*p);
                let upstream = g.item();
                let d = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &y)| {
                        let mut d = 0.0;
                        if p >= PROB_FLOOR {
                            d -= y / p;
                        }
                        if 1.0 - p >= PROB_FLOOR {
                            d += (1.0 - y) / (1.0 - p);
                        }
                        upstream * d
                    })
                    .collect();
                self.accumulate(grads, *p, Tensor::new(pv.shape(), d)?);
            }
        }
        Ok(())
    }
}

/// `−[y log p + (1−y) log(1−p)]` with both logs clamped.
pub(crate) fn bce_value(p: f64, y: f64) -> f64 {
    let lp = p.clamp(PROB_FLOOR, 1.0).ln();
    let lq = (1.0 - p).clamp(PROB_FLOOR, 1.0).ln();
    let mut loss = 0.0;
    if y != 0.0 {
        loss -= y * lp;
    }
    if y != 1.0 {
        loss -= (1.0 - y) * lq;
    }
    loss
}
