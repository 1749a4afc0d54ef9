//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node. Nodes
//! are appended after their inputs, so node order is a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//! A graph is single-use: build a fresh one per forward pass.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{col2im, im2col, maxpool, ConvGeom};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{axis_blocks, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Stride and zero padding of a 2-D convolution, as `(height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

/// Running statistics of a batch-norm layer. Updated in training mode,
/// consumed in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Freed,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SelectRows {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Mean(Var),
    Mse {
        pred: Var,
        target: Var,
        weights: Option<Vec<T>>,
        weight_sum: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_slots: usize,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn grad_buf<'a, T: Scalar>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_slots: 0,
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf { param: None },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bring a stored parameter into the graph. Its gradient is reported by
    /// [`Gradients::param`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.param_slots = self.param_slots.max(id.0 + 1);
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf { param: Some(id) },
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = *xs.last().unwrap_or(&1);
        if self.shape(b) != [n] {
            return shape_err("add_bias", format!("x {:?}, bias {:?}", xs, self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            add_into(row, &bias);
        }
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `x w + b` for `x: [m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so corrupt inputs still surface in the loss
        let value = self.value(x).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(value, Op::Tanh(x), &[x])
    }

    /// Square root whose gradient is defined as zero where the input is zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("sqrt of a negative value".into()));
        }
        let value = self.value(x).map(|v| v.sqrt());
        Ok(self.push(value, Op::Sqrt(x), &[x]))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. In
    /// evaluation mode (or with `p == 0`) this is the identity and returns
    /// `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Row-wise choice between two same-shape tensors: row `r` (along the
    /// first axis) comes from `a` where `mask[r]` is set, from `b` otherwise.
    /// Values are copied bit-exactly.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let rows = self.shape(a).first().copied().unwrap_or(1);
        if rows != mask.len() {
            return shape_err("select_rows", format!("{rows} rows, mask {}", mask.len()));
        }
        let row_len = self.value(a).numel() / rows.max(1);
        let mut value = self.value(b).clone();
        let av = self.value(a).data();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                value.data_mut()[r * row_len..(r + 1) * row_len]
                    .copy_from_slice(&av[r * row_len..(r + 1) * row_len]);
            }
        }
        Ok(self.push(
            value,
            Op::SelectRows {
                mask: mask.to_vec(),
                a,
                b,
            },
            &[a, b],
        ))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for shape {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("slice", format!("{start}+{len} on axis {axis} of {s:?}"));
        }
        let (outer, n, inner) = axis_blocks(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * n + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// 2-D convolution. `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: Conv2dOptions,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return shape_err("conv2d", format!("input {xs:?}, weight {ws:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return shape_err("conv2d", format!("bias {:?}", self.shape(b)));
            }
        }
        let (sh, sw) = opts.stride;
        let (ph, pw) = opts.padding;
        if sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (hp, wp) = (xs[2] + 2 * ph, xs[3] + 2 * pw);
        if hp < ws[2] || wp < ws[3] {
            return shape_err(
                "conv2d",
                format!("kernel {}x{} larger than padded input {hp}x{wp}", ws[2], ws[3]),
            );
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            kh: ws[2],
            kw: ws[3],
            sh,
            sw,
            ph,
            pw,
            out_h: (hp - ws[2]) / sh + 1,
            out_w: (wp - ws[3]) / sw + 1,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut out = vec![T::zero(); geom.batch * geom.out_sample()];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data().to_vec());
        for n in 0..geom.batch {
            im2col(
                &xv[n * geom.in_sample()..(n + 1) * geom.in_sample()],
                &geom,
                &mut cols,
            );
            let dst = &mut out[n * geom.out_sample()..(n + 1) * geom.out_sample()];
            if let Some(bias) = &bias {
                for (o, chunk) in dst.chunks_mut(cols_n).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bias[o]);
                }
            }
            gemm(geom.out_c, rows, cols_n, wv, false, &cols, false, dst, bias.is_some());
        }
        let value = Tensor::new(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Max pooling over the last two axes of `[B, C, H, W]` with a square
    /// `kernel` and `stride`; trailing rows/columns that do not fill a
    /// window are dropped (floor semantics).
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return shape_err("maxpool2d", format!("input {xs:?}, kernel {kernel}"));
        }
        let (out, argmax, oh, ow) =
            maxpool(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3], kernel, stride);
        let value = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Batch normalization over axis 1 of `[B, C, ...]`. Training mode
    /// normalizes with batch statistics and updates `state`; evaluation mode
    /// uses the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        train: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err("batch_norm", format!("input {xs:?}"));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return shape_err("batch_norm", format!("{c} channels"));
        }
        let (outer, _, inner) = axis_blocks(&xs, 1);
        let count = outer * inner;
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![0.0f64; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0f64;
                for o in 0..outer {
                    let base = (o * c + ch) * inner;
                    sum += xv[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for o in 0..outer {
                    let base = (o * c + ch) * inner;
                    sq += xv[base..base + inner]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                let unbiased = if count > 1 {
                    var * count as f64 / (count - 1) as f64
                } else {
                    var
                };
                let m = state.momentum;
                state.running_mean[ch] = T::from_f64_lossy(
                    (1.0 - m) * state.running_mean[ch].as_f64() + m * mean,
                );
                state.running_var[ch] = T::from_f64_lossy(
                    (1.0 - m) * state.running_var[ch].as_f64() + m * unbiased,
                );
                (mean, var)
            } else {
                (
                    state.running_mean[ch].as_f64(),
                    state.running_var[ch].as_f64(),
                )
            };
            means[ch] = mean;
            inv_std[ch] = T::from_f64_lossy(1.0 / (var + state.eps).sqrt());
        }
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let mean = T::from_f64_lossy(means[ch]);
                for i in base..base + inner {
                    let h = (xv[i] - mean) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let f = *xs.last().unwrap_or(&0);
        if f == 0 || self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return shape_err("layer_norm", format!("input {xs:?}"));
        }
        let xv = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / f;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * f..(r + 1) * f];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / f as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = T::from_f64_lossy(is);
            let mean = T::from_f64_lossy(mean);
            for j in 0..f {
                let h = (row[j] - mean) * inv_std[r];
                xhat[r * f + j] = h;
                out[r * f + j] = g[j] * h + bt[j];
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.numel()).unwrap_or_else(T::one);
        let s: T = v.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let n = self.value(pred).numel();
        if n == 0 {
            return Err(Error::InvalidArgument("mse of empty tensors".into()));
        }
        let sum: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let weight_sum = T::from_usize(n).expect("count");
        Ok(self.push(
            Tensor::scalar(sum / weight_sum),
            Op::Mse {
                pred,
                target,
                weights: None,
                weight_sum,
            },
            &[pred, target],
        ))
    }

    /// `sum(w * (pred - target)^2) / sum(w)`. With 0/1 weights this is the
    /// mean squared error over the selected elements only.
    pub fn weighted_mse_loss(&mut self, pred: Var, target: Var, weights: &[T]) -> Result<Var> {
        self.same_shape("weighted_mse_loss", pred, target)?;
        if weights.len() != self.value(pred).numel() {
            return shape_err(
                "weighted_mse_loss",
                format!("{} weights for {} elements", weights.len(), self.value(pred).numel()),
            );
        }
        let weight_sum: T = weights.iter().copied().sum();
        if weight_sum <= T::zero() {
            return Err(Error::InvalidArgument("weights sum to zero".into()));
        }
        let sum: T = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .zip(weights)
            .map(|((&p, &t), &w)| w * (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Tensor::scalar(sum / weight_sum),
            Op::Mse {
                pred,
                target,
                weights: Some(weights.to_vec()),
                weight_sum,
            },
            &[pred, target],
        ))
    }

    pub fn rmse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let mse = self.mse_loss(pred, target)?;
        self.sqrt(mse)
    }

    /// Propagate gradients from the scalar `loss` to every leaf that
    /// requires them. Saved intermediates are released; node values stay
    /// readable.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: vec![None; self.param_slots],
            leaves: HashMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Freed);
            let nodes = &self.nodes;
            let y = nodes[i].value.data();
            match op {
                Op::Leaf { param } => {
                    let t = Tensor::new(nodes[i].value.shape().to_vec(), g)?;
                    if let Some(id) = param {
                        out.params[id.0] = Some(t.clone());
                    }
                    out.leaves.insert(Var(i), t);
                }
                Op::Freed => {}
                Op::Reshape(x) => {
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        add_into(d, &g);
                    }
                }
                Op::Add(a, b) => {
                    if let Some(d) = grad_buf(&mut grads, nodes, a) {
                        add_into(d, &g);
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, b) {
                        add_into(d, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(d) = grad_buf(&mut grads, nodes, a) {
                        add_into(d, &g);
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, b) {
                        d.iter_mut().zip(&g).for_each(|(d, &g)| *d -= g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(d) = grad_buf(&mut grads, nodes, a) {
                        for ((d, &g), &v) in d.iter_mut().zip(&g).zip(vb) {
                            *d += g * v;
                        }
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, b) {
                        for ((d, &g), &v) in d.iter_mut().zip(&g).zip(va) {
                            *d += g * v;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        d.iter_mut().zip(&g).for_each(|(d, &g)| *d += g * s);
                    }
                }
                Op::AddBias(x, b) => {
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        add_into(d, &g);
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, b) {
                        let n = d.len();
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(d) = grad_buf(&mut grads, nodes, a) {
                        gemm(m, n, k, &g, false, vb, true, d, true);
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, b) {
                        gemm(k, m, n, va, true, &g, false, d, true);
                    }
                }
                Op::Relu(x) => {
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        for ((d, &g), &y) in d.iter_mut().zip(&g).zip(y) {
                            if y > T::zero() {
                                *d += g;
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        for ((d, &g), &y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * y * (T::one() - y);
                        }
                    }
                }
                Op::Tanh(x) => {
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        for ((d, &g), &y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * (T::one() - y * y);
                        }
                    }
                }
                Op::Sqrt(x) => {
                    let two = T::one() + T::one();
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        for ((d, &g), &y) in d.iter_mut().zip(&g).zip(y) {
                            if y > T::zero() {
                                *d += g / (two * y);
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        for ((d, &g), &m) in d.iter_mut().zip(&g).zip(&mask) {
                            *d += g * m;
                        }
                    }
                }
                Op::SelectRows { mask, a, b } => {
                    let row_len = g.len() / mask.len().max(1);
                    for (src, pick) in [(a, true), (b, false)] {
                        if let Some(d) = grad_buf(&mut grads, nodes, src) {
                            for (r, &m) in mask.iter().enumerate() {
                                if m == pick {
                                    let span = r * row_len..(r + 1) * row_len;
                                    add_into(&mut d[span.clone()], &g[span]);
                                }
                            }
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let shape = nodes[i].value.shape();
                    let (outer, total, inner) = axis_blocks(shape, axis);
                    let mut offset = 0;
                    for v in inputs {
                        let len = nodes[v.0].value.shape()[axis];
                        if let Some(d) = grad_buf(&mut grads, nodes, v) {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                add_into(
                                    &mut d[o * len * inner..(o + 1) * len * inner],
                                    &g[src..src + len * inner],
                                );
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let len = nodes[i].value.shape()[axis];
                    let (outer, n, inner) = axis_blocks(nodes[x.0].value.shape(), axis);
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        for o in 0..outer {
                            let dst = (o * n + start) * inner;
                            add_into(
                                &mut d[dst..dst + len * inner],
                                &g[o * len * inner..(o + 1) * len * inner],
                            );
                        }
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                    let xv = nodes[x.0].value.data();
                    let wv = nodes[w.0].value.data();
                    if let Some(b) = b {
                        if let Some(d) = grad_buf(&mut grads, nodes, b) {
                            for gs in g.chunks(geom.out_sample()) {
                                for (o, chunk) in gs.chunks(ncols).enumerate() {
                                    d[o] += chunk.iter().copied().sum::<T>();
                                }
                            }
                        }
                    }
                    let need_w = nodes[w.0].requires_grad;
                    let need_x = nodes[x.0].requires_grad;
                    let mut cols = vec![T::zero(); rows * ncols];
                    if need_w {
                        let d = grad_buf(&mut grads, nodes, w).expect("requires grad");
                        for n in 0..geom.batch {
                            im2col(
                                &xv[n * geom.in_sample()..(n + 1) * geom.in_sample()],
                                &geom,
                                &mut cols,
                            );
                            let gs = &g[n * geom.out_sample()..(n + 1) * geom.out_sample()];
                            gemm(geom.out_c, ncols, rows, gs, false, &cols, true, d, true);
                        }
                    }
                    if need_x {
                        let d = grad_buf(&mut grads, nodes, x).expect("requires grad");
                        for n in 0..geom.batch {
                            let gs = &g[n * geom.out_sample()..(n + 1) * geom.out_sample()];
                            gemm(rows, geom.out_c, ncols, wv, true, gs, false, &mut cols, false);
                            col2im(
                                &cols,
                                &geom,
                                &mut d[n * geom.in_sample()..(n + 1) * geom.in_sample()],
                            );
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        for (&idx, &g) in argmax.iter().zip(&g) {
                            d[idx] += g;
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let xs = nodes[x.0].value.shape();
                    let c = xs[1];
                    let (outer, _, inner) = axis_blocks(xs, 1);
                    let count = T::from_usize(outer * inner).expect("count");
                    let gv = nodes[gamma.0].value.data().to_vec();
                    // per-channel sums of dy and dy * xhat
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            for j in base..base + inner {
                                sum_g[ch] += g[j];
                                sum_gx[ch] += g[j] * xhat[j];
                            }
                        }
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, gamma) {
                        add_into(d, &sum_gx);
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, beta) {
                        add_into(d, &sum_g);
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        for o in 0..outer {
                            for ch in 0..c {
                                let base = (o * c + ch) * inner;
                                let k = gv[ch] * inv_std[ch];
                                for j in base..base + inner {
                                    d[j] += if train {
                                        k * (g[j] - sum_g[ch] / count
                                            - xhat[j] * sum_gx[ch] / count)
                                    } else {
                                        k * g[j]
                                    };
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let f = *nodes[x.0].value.shape().last().expect("rank >= 1");
                    let fc = T::from_usize(f).expect("count");
                    let gv = nodes[gamma.0].value.data().to_vec();
                    if let Some(d) = grad_buf(&mut grads, nodes, gamma) {
                        for (r, row) in g.chunks(f).enumerate() {
                            for j in 0..f {
                                d[j] += row[j] * xhat[r * f + j];
                            }
                        }
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, beta) {
                        for row in g.chunks(f) {
                            add_into(d, row);
                        }
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        for (r, row) in g.chunks(f).enumerate() {
                            let h = &xhat[r * f..(r + 1) * f];
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..f {
                                let dh = row[j] * gv[j];
                                s1 += dh;
                                s2 += dh * h[j];
                            }
                            for j in 0..f {
                                let dh = row[j] * gv[j];
                                d[r * f + j] += inv_std[r] * (dh - s1 / fc - h[j] * s2 / fc);
                            }
                        }
                    }
                }
                Op::Mean(x) => {
                    if let Some(d) = grad_buf(&mut grads, nodes, x) {
                        let n = T::from_usize(d.len()).expect("count");
                        let share = g[0] / n;
                        d.iter_mut().for_each(|d| *d += share);
                    }
                }
                Op::Mse {
                    pred,
                    target,
                    weights,
                    weight_sum,
                } => {
                    let two = T::one() + T::one();
                    let pv = nodes[pred.0].value.data();
                    let tv = nodes[target.0].value.data();
                    let coef = g[0] * two / weight_sum;
                    let dp: Vec<T> = match &weights {
                        Some(w) => pv
                            .iter()
                            .zip(tv)
                            .zip(w)
                            .map(|((&p, &t), &w)| coef * w * (p - t))
                            .collect(),
                        None => pv.iter().zip(tv).map(|(&p, &t)| coef * (p - t)).collect(),
                    };
                    if let Some(d) = grad_buf(&mut grads, nodes, pred) {
                        add_into(d, &dp);
                    }
                    if let Some(d) = grad_buf(&mut grads, nodes, target) {
                        d.iter_mut().zip(&dp).for_each(|(d, &v)| *d -= v);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_derivative_at_three() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0f64));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).item(), Some(9.0));
        assert_eq!(grads.wrt(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 2.0, 0.0]));
        let r = g.relu(x);
        let s = g.sigmoid(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        assert_eq!(g.value(s).data()[2], 0.5);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
        let m = g.mean(y);
        g.backward(m).unwrap();
        assert_eq!(g.backward(m).unwrap_err(), Error::BackwardTwice);
    }

    #[test]
    fn eval_dropout_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.variable(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        let m = g.mean(y);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn one_by_one_conv_scales() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.5]));
        let y = g.conv2d(x, w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(g.value(y).data(), &[2.5, 5.0, 7.5, 10.0, 12.5, 15.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 3], &[0.0; 6]));
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(t(&[3], &[0.0; 3]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn maxpool_rejects_too_small_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 4], &[0.0; 4]));
        assert!(g.maxpool2d(x, 2, 2).is_err());
    }

    #[test]
    fn rmse_gradient_is_zero_at_exact_fit() {
        let mut g = Graph::new();
        let p = g.variable(t(&[2], &[0.3, 0.7]));
        let q = g.constant(t(&[2], &[0.3, 0.7]));
        let l = g.rmse_loss(p, q).unwrap();
        assert_eq!(g.value(l).item(), Some(0.0));
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut g = Graph::new();
        let mut st = BatchNormState::<f64>::new(1);
        st.running_mean[0] = 1.0;
        st.running_var[0] = 4.0 - st.eps;
        let x = g.constant(t(&[2, 1], &[1.0, 5.0]));
        let gamma = g.constant(t(&[1], &[1.0]));
        let beta = g.constant(t(&[1], &[0.0]));
        let y = g.batch_norm(x, gamma, beta, &mut st, false).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.0).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut g = Graph::new();
        let mut st = BatchNormState::<f64>::new(1);
        let x = g.constant(t(&[2, 1], &[1.0, 3.0]));
        let gamma = g.constant(t(&[1], &[1.0]));
        let beta = g.constant(t(&[1], &[0.0]));
        g.batch_norm(x, gamma, beta, &mut st, true).unwrap();
        assert!((st.running_mean[0] - 0.2).abs() < 1e-12);
        // unbiased variance 2.0
        assert!((st.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn select_rows_picks_exact_rows() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let s = g.select_rows(&[false, true], a, b).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0, 3.0, 4.0]);
    }
}
