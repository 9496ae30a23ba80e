//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep.

use std::fmt;

use super::kernels::{self, ConvGeom, NormKind};
use crate::error::{Error, Result};
use crate::spectral;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize, out_pad: usize },
    Upsample { factor: usize },
    Linear,
    MatMul,
    Norm { kind: NormKind, eps: f64 },
    BatchNormEval { eps: f64 },
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    LogSigmoid,
    Exp,
    Log { floor: f64 },
    Abs,
    Square,
    Cos,
    Magnitude,
    MaxPool { k: usize },
    AvgPool { k: usize },
    Add,
    Sub,
    Mul,
    AddScalar { c: f64 },
    Scale { c: f64 },
    SwapAxes { a: usize, b: usize },
    SumAll,
    MeanAll,
    SumTrailing { axes: usize },
    MaxTrailing { axes: usize },
    Dft2,
    Reshape,
    IndexSelect { indices: Vec<usize> },
    LogSoftmax,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Upsample { .. } => "upsample",
            Op::Linear => "linear",
            Op::MatMul => "matmul",
            Op::Norm { kind, .. } => match kind {
                NormKind::Batch => "batch_norm",
                NormKind::Instance => "instance_norm",
                NormKind::Layer => "layer_norm",
            },
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::LogSigmoid => "log_sigmoid",
            Op::Exp => "exp",
            Op::Log { .. } => "log",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Cos => "cos",
            Op::Magnitude => "magnitude",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddScalar { .. } => "add_scalar",
            Op::Scale { .. } => "scale",
            Op::SwapAxes { .. } => "swap_axes",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::SumTrailing { .. } => "sum_trailing",
            Op::MaxTrailing { .. } => "max_trailing",
            Op::Dft2 => "dft2",
            Op::Reshape => "reshape",
            Op::IndexSelect { .. } => "index_select",
            Op::LogSoftmax => "log_softmax",
        }
    }
}

enum Saved<T> {
    None,
    Cols(Vec<T>),
    Indices(Vec<usize>),
    Norm { xhat: Vec<T>, inv_std: Vec<T>, groups: Vec<usize> },
    Running { mean: Vec<T>, var: Vec<T> },
}

struct Node<T> {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor<T>,
    saved: Saved<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `true` when the loss does not depend on `v`.
    pub fn is_disconnected(&self, v: Var) -> bool {
        self.get(v).is_none()
    }
}

fn node_label(op: &Op, id: usize) -> String {
    format!("{}#{id}", op.name())
}

fn dims4(t: &Tensor<impl Scalar>, op: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected NCHW input, got {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: t,
            saved: Saved::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient tracked).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    fn push(&mut self, op: Op, inputs: &[Var], value: Tensor<T>, saved: Saved<T>) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: node_label(&op, id),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            saved,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn label(&self, op: &str) -> String {
        format!("{op}#{}", self.nodes.len())
    }

    fn check_same(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                self.label(op),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn check_bias(&self, op: &str, bias: Option<Var>, len: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [len] {
                return Err(Error::shape(
                    self.label(op),
                    format!("bias {:?} for {len} outputs", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    fn inputs_with_bias(x: Var, w: Var, b: Option<Var>) -> Vec<Var> {
        let mut v = vec![x, w];
        v.extend(b);
        v
    }

    // ---------------------------------------------------------------- layers

    /// `x [N,C,H,W]`, `w [O,C,kh,kw]`, `b [O]`; zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x), &self.label("conv2d"))?;
        let (o, wc, kh, kw) = dims4(self.value(w), &self.label("conv2d"))?;
        if wc != c || stride == 0 {
            return Err(Error::shape(
                self.label("conv2d"),
                format!("input channels {c} vs kernel {:?}", self.shape(w)),
            ));
        }
        self.check_bias("conv2d", b, o)?;
        let (oh, ow) = match (
            ConvGeom::conv_out(h, kh, stride, pad),
            ConvGeom::conv_out(wd, kw, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::shape(self.label("conv2d"), "kernel larger than padded input")),
        };
        let g = ConvGeom { n, c, h, w: wd, kh, kw, stride, pad, oh, ow };
        let cols = kernels::im2col(self.value(x).data(), &g);
        let mat = kernels::matmul(self.value(w).data(), &cols, o, g.col_rows(), g.col_cols(), false, false);
        let mut out = kernels::cn_to_nc(&mat, n, o, oh * ow);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, o, oh * ow);
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        self.push(Op::Conv2d { stride, pad }, &Self::inputs_with_bias(x, w, b), value, Saved::Cols(cols))
    }

    /// `x [N,Ci,H,W]`, `w [Ci,Co,kh,kw]`, `b [Co]`.
    /// Output side is `(H-1)*stride - 2*pad + k + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let label = self.label("conv_transpose2d");
        let (n, ci, h, wd) = dims4(self.value(x), &label)?;
        let (wci, co, kh, kw) = dims4(self.value(w), &label)?;
        if wci != ci || stride == 0 || out_pad >= stride {
            return Err(Error::shape(label, format!("input {:?} kernel {:?}", self.shape(x), self.shape(w))));
        }
        self.check_bias("conv_transpose2d", b, co)?;
        let oh = ((h - 1) * stride + kh + out_pad).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + kw + out_pad).checked_sub(2 * pad);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(Error::shape(label, "padding exceeds output")),
        };
        let g = ConvGeom { n, c: co, h: oh, w: ow, kh, kw, stride, pad, oh: h, ow: wd };
        let xmat = kernels::nc_to_cn(self.value(x).data(), n, ci, h * wd);
        let cols = kernels::matmul(self.value(w).data(), &xmat, co * kh * kw, ci, n * h * wd, true, false);
        let mut out = kernels::col2im(&cols, &g);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, co, oh * ow);
        }
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        self.push(
            Op::ConvTranspose2d { stride, pad, out_pad },
            &Self::inputs_with_bias(x, w, b),
            value,
            Saved::Cols(xmat),
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), &self.label("upsample"))?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    out[p * oh * ow + i * ow + j] = src[p * h * w + (i / factor) * w + j / factor];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push(Op::Upsample { factor }, &[x], value, Saved::None)
    }

    /// `x [N,in]`, `w [out,in]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, fin, fout) = match (xs.as_slice(), ws.as_slice()) {
            ([n, i], [o, wi]) if i == wi => (*n, *i, *o),
            _ => return Err(Error::shape(self.label("linear"), format!("x {xs:?} w {ws:?}"))),
        };
        self.check_bias("linear", b, fout)?;
        let mut out = kernels::matmul(self.value(x).data(), self.value(w).data(), n, fin, fout, false, true);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v = *v + bb;
                }
            }
        }
        let value = Tensor::new(vec![n, fout], out)?;
        self.push(Op::Linear, &Self::inputs_with_bias(x, w, b), value, Saved::None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(Error::shape(self.label("matmul"), format!("{sa:?} x {sb:?}"))),
        };
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, false, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul, &[a, b], value, Saved::None)
    }

    /// Normalization with per-channel affine `gamma`, `beta` (both `[C]`).
    /// Returns the batch statistics for batch-norm running averages.
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let label = self.label("norm");
        let (n, c, h, w) = dims4(self.value(x), &label)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(label, "affine parameters must be [C]"));
        }
        let p = h * w;
        let (ids, count) = kernels::norm_groups(kind, n, c, p);
        let xd = self.value(x).data();
        let (mean, var) = kernels::group_stats(xd, &ids, count);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::c(eps)).sqrt()).collect();
        let xhat: Vec<T> = xd
            .iter()
            .zip(&ids)
            .map(|(&v, &g)| (v - mean[g]) * inv_std[g])
            .collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / p) % c;
                v * gd[ch] + bd[ch]
            })
            .collect();
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let v = self.push(
            Op::Norm { kind, eps },
            &[x, gamma, beta],
            value,
            Saved::Norm { xhat, inv_std, groups: ids },
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Batch norm with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let label = self.label("batch_norm_eval");
        let (n, c, h, w) = dims4(self.value(x), &label)?;
        if self.shape(gamma) != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(label, "statistics must be [C]"));
        }
        let p = h * w;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / p) % c;
                (v - running_mean[ch]) / (running_var[ch] + T::c(eps)).sqrt() * gd[ch] + bd[ch]
            })
            .collect();
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            Op::BatchNormEval { eps },
            &[x, gamma, beta],
            value,
            Saved::Running {
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
            },
        )
    }

    // ------------------------------------------------------------ pointwise

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(op, &[x], value, Saved::None)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu, |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::c(slope);
        self.unary(x, Op::LeakyRelu { slope }, move |v| if v > T::zero() { v } else { v * s })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh, |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::LogSigmoid, |v| -softplus(-v))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp, |v| v.exp())
    }

    /// `ln(max(x, floor))`; zero gradient below the floor.
    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        let fl = T::c(floor);
        self.unary(x, Op::Log { floor }, move |v| v.max(fl).ln())
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs, |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square, |v| v * v)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Cos, |v| v.cos())
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let cc = T::c(c);
        self.unary(x, Op::AddScalar { c }, move |v| v + cc)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let cc = T::c(c);
        self.unary(x, Op::Scale { c }, move |v| v * cc)
    }

    /// `|z|` over a trailing `(re, im)` axis of length 2. Subgradient 0 at `z = 0`.
    pub fn magnitude(&mut self, z: Var) -> Result<Var> {
        let s = self.shape(z).to_vec();
        if s.last() != Some(&2) {
            return Err(Error::shape(self.label("magnitude"), format!("expected trailing 2, got {s:?}")));
        }
        let out: Vec<T> = self.value(z).data().chunks(2).map(|c| c[0].hypot(c[1])).collect();
        let value = Tensor::new(s[..s.len() - 1].to_vec(), out)?;
        self.push(Op::Magnitude, &[z], value, Saved::None)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check_same(op.name(), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(op, &[a, b], value, Saved::None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    // -------------------------------------------------------------- pooling

    fn pool(&mut self, x: Var, k: usize, max: bool) -> Result<Var> {
        let name = if max { "max_pool" } else { "avg_pool" };
        let (n, c, h, w) = dims4(self.value(x), &self.label(name))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape(self.label(name), format!("{h}x{w} not divisible by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut arg = Vec::new();
        if max {
            arg = vec![0usize; out.len()];
        }
        let inv = T::c(1.0 / (k * k) as f64);
        for p in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    let o = p * oh * ow + i * ow + j;
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    let mut acc = T::zero();
                    for di in 0..k {
                        for dj in 0..k {
                            let s = p * h * w + (i * k + di) * w + j * k + dj;
                            if src[s] > best {
                                best = src[s];
                                best_idx = s;
                            }
                            acc = acc + src[s];
                        }
                    }
                    if max {
                        out[o] = best;
                        arg[o] = best_idx;
                    } else {
                        out[o] = acc * inv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        if max {
            self.push(Op::MaxPool { k }, &[x], value, Saved::Indices(arg))
        } else {
            self.push(Op::AvgPool { k }, &[x], value, Saved::None)
        }
    }

    /// Non-overlapping `k x k` max pooling (stride `k`).
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.pool(x, k, true)
    }

    /// Non-overlapping `k x k` average pooling (stride `k`).
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.pool(x, k, false)
    }

    // -------------------------------------------------------------- shaping

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|_| Error::shape(self.label("reshape"), format!("{:?} -> {shape:?}", self.shape(x))))?;
        self.push(Op::Reshape, &[x], value, Saved::None)
    }

    /// Swap axes `a` and `b`.
    pub fn swap_axes(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if a >= shape.len() || b >= shape.len() {
            return Err(Error::shape(self.label("swap_axes"), format!("axes {a},{b} of {shape:?}")));
        }
        let out = permute_swap(self.value(x).data(), &shape, a, b);
        let mut new_shape = shape;
        new_shape.swap(a, b);
        let value = Tensor::new(new_shape, out)?;
        self.push(Op::SwapAxes { a, b }, &[x], value, Saved::None)
    }

    /// Select entries of the last axis.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape(self.label("index_select"), "scalar input"))?;
        if indices.iter().any(|&i| i >= d) {
            return Err(Error::shape(self.label("index_select"), format!("index out of range {d}")));
        }
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| indices.iter().map(move |&i| row[i]))
            .collect();
        let mut ns = shape;
        *ns.last_mut().unwrap() = indices.len();
        let value = Tensor::new(ns, out)?;
        self.push(Op::IndexSelect { indices: indices.to_vec() }, &[x], value, Saved::None)
    }

    // ----------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll, &[x], value, Saved::None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / T::c(t.numel() as f64));
        self.push(Op::MeanAll, &[x], value, Saved::None)
    }

    fn trailing_split(&self, x: Var, axes: usize, op: &str) -> Result<(Vec<usize>, usize)> {
        let s = self.shape(x);
        if axes == 0 || axes > s.len() {
            return Err(Error::shape(self.label(op), format!("cannot reduce {axes} axes of {s:?}")));
        }
        let keep = s[..s.len() - axes].to_vec();
        let inner = s[s.len() - axes..].iter().product();
        Ok((keep, inner))
    }

    /// Sum over the last `axes` axes.
    pub fn sum_trailing(&mut self, x: Var, axes: usize) -> Result<Var> {
        let (keep, inner) = self.trailing_split(x, axes, "sum_trailing")?;
        let out = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        let value = Tensor::new(keep, out)?;
        self.push(Op::SumTrailing { axes }, &[x], value, Saved::None)
    }

    /// Max over the last `axes` axes; ties resolve to the first element in row-major order.
    pub fn max_trailing(&mut self, x: Var, axes: usize) -> Result<Var> {
        let (keep, inner) = self.trailing_split(x, axes, "max_trailing")?;
        let mut arg = Vec::new();
        let out = self
            .value(x)
            .data()
            .chunks(inner)
            .enumerate()
            .map(|(ci, c)| {
                let mut best = 0;
                for (i, v) in c.iter().enumerate() {
                    if *v > c[best] {
                        best = i;
                    }
                }
                arg.push(ci * inner + best);
                c[best]
            })
            .collect();
        let value = Tensor::new(keep, out)?;
        self.push(Op::MaxTrailing { axes }, &[x], value, Saved::Indices(arg))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape(self.label("log_softmax"), "scalar input"))?;
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let lse = m + row.iter().fold(T::zero(), |a, &b| a + (b - m).exp()).ln();
                row.iter().map(move |&v| v - lse)
            })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(Op::LogSoftmax, &[x], value, Saved::None)
    }

    // ------------------------------------------------------------- spectral

    /// Centered unnormalized DFT over the last two axes: `[.., H, W] -> [.., H, W, 2]`.
    pub fn dft2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] < 2 || s[s.len() - 2] < 2 {
            return Err(Error::shape(self.label("dft2"), format!("need [.., H>=2, W>=2], got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = Vec::with_capacity(self.value(x).numel() * 2);
        for plane in self.value(x).data().chunks(h * w) {
            let (re, im) = spectral::dft2_centered(plane, h, w);
            for (r, i) in re.into_iter().zip(im) {
                out.push(r);
                out.push(i);
            }
        }
        let mut ns = s;
        ns.push(2);
        let value = Tensor::new(ns, out)?;
        self.push(Op::Dft2, &[x], value, Saved::None)
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                node_label(self.op(loss), loss.0),
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let input_grads = self.backward_node(id, &g);
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                if let Some(ig) = ig {
                    match &mut grads[inp] {
                        Some(acc) => acc.iter_mut().zip(ig).for_each(|(a, b)| *a = *a + b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, &node.op) {
                    (Some(g), Op::Leaf) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[id];
        let inp = |k: usize| &self.nodes[node.inputs[k]].value;
        let wants = |k: usize| self.nodes[node.inputs[k]].requires_grad;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { stride, pad } => {
                let Saved::Cols(cols) = &node.saved else { unreachable!() };
                let (n, c, h, w) = dims4(inp(0), "").unwrap();
                let (o, _, kh, kw) = dims4(inp(1), "").unwrap();
                let (_, _, oh, ow) = dims4(&node.value, "").unwrap();
                let geom = ConvGeom { n, c, h, w, kh, kw, stride: *stride, pad: *pad, oh, ow };
                let dmat = kernels::nc_to_cn(g, n, o, oh * ow);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let dx = wants(0).then(|| {
                    let dcols = kernels::matmul(inp(1).data(), &dmat, rows, o, ncols, true, false);
                    kernels::col2im(&dcols, &geom)
                });
                let dw = wants(1).then(|| kernels::matmul(&dmat, cols, o, ncols, rows, false, true));
                let mut out = vec![dx, dw];
                if node.inputs.len() == 3 {
                    out.push(wants(2).then(|| channel_sum(g, n, o, oh * ow)));
                }
                out
            }
            Op::ConvTranspose2d { stride, pad, .. } => {
                let Saved::Cols(xmat) = &node.saved else { unreachable!() };
                let (n, ci, h, w) = dims4(inp(0), "").unwrap();
                let (_, co, kh, kw) = dims4(inp(1), "").unwrap();
                let (_, _, oh, ow) = dims4(&node.value, "").unwrap();
                let geom = ConvGeom { n, c: co, h: oh, w: ow, kh, kw, stride: *stride, pad: *pad, oh: h, ow: w };
                let dcols = kernels::im2col(g, &geom);
                let (rows, ncols) = (co * kh * kw, n * h * w);
                let dx = wants(0).then(|| {
                    let m = kernels::matmul(inp(1).data(), &dcols, ci, rows, ncols, false, false);
                    kernels::cn_to_nc(&m, n, ci, h * w)
                });
                let dw = wants(1).then(|| kernels::matmul(xmat, &dcols, ci, ncols, rows, false, true));
                let mut out = vec![dx, dw];
                if node.inputs.len() == 3 {
                    out.push(wants(2).then(|| channel_sum(g, n, co, oh * ow)));
                }
                out
            }
            Op::Upsample { factor } => {
                let (n, c, h, w) = dims4(inp(0), "").unwrap();
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let d = p * h * w + (i / factor) * w + j / factor;
                            dx[d] = dx[d] + g[p * oh * ow + i * ow + j];
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Linear => {
                let (n, fin) = (inp(0).shape()[0], inp(0).shape()[1]);
                let fout = inp(1).shape()[0];
                let dx = wants(0).then(|| kernels::matmul(g, inp(1).data(), n, fout, fin, false, false));
                let dw = wants(1).then(|| kernels::matmul(g, inp(0).data(), fout, n, fin, true, false));
                let mut out = vec![dx, dw];
                if node.inputs.len() == 3 {
                    out.push(wants(2).then(|| {
                        let mut db = vec![T::zero(); fout];
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                        }
                        db
                    }));
                }
                out
            }
            Op::MatMul => {
                let (m, k) = (inp(0).shape()[0], inp(0).shape()[1]);
                let n = inp(1).shape()[1];
                vec![
                    wants(0).then(|| kernels::matmul(g, inp(1).data(), m, n, k, false, true)),
                    wants(1).then(|| kernels::matmul(inp(0).data(), g, k, m, n, true, false)),
                ]
            }
            Op::Norm { .. } => {
                let Saved::Norm { xhat, inv_std, groups } = &node.saved else { unreachable!() };
                let (_, c, h, w) = dims4(inp(0), "").unwrap();
                let p = h * w;
                let gamma = inp(1).data();
                let ng = inv_std.len();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_d = vec![T::zero(); ng];
                let mut sum_dx = vec![T::zero(); ng];
                let mut cnt = vec![0usize; ng];
                let dxhat: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let ch = (i / p) % c;
                        dgamma[ch] = dgamma[ch] + gi * xhat[i];
                        dbeta[ch] = dbeta[ch] + gi;
                        let d = gi * gamma[ch];
                        let gid = groups[i];
                        sum_d[gid] = sum_d[gid] + d;
                        sum_dx[gid] = sum_dx[gid] + d * xhat[i];
                        cnt[gid] += 1;
                        d
                    })
                    .collect();
                let dx = wants(0).then(|| {
                    dxhat
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| {
                            let gid = groups[i];
                            let m = T::c(cnt[gid] as f64);
                            inv_std[gid] / m * (m * d - sum_d[gid] - xhat[i] * sum_dx[gid])
                        })
                        .collect()
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            }
            Op::BatchNormEval { eps } => {
                let Saved::Running { mean, var } = &node.saved else { unreachable!() };
                let (_, c, h, w) = dims4(inp(0), "").unwrap();
                let p = h * w;
                let gamma = inp(1).data();
                let x = inp(0).data();
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + T::c(*eps)).sqrt()).collect();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); x.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let ch = (i / p) % c;
                    dgamma[ch] = dgamma[ch] + gi * (x[i] - mean[ch]) * inv[ch];
                    dbeta[ch] = dbeta[ch] + gi;
                    dx[i] = gi * gamma[ch] * inv[ch];
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::Relu => {
                let x = inp(0).data();
                vec![Some(zip_map(g, x, |gi, xi| if xi > T::zero() { gi } else { T::zero() }))]
            }
            Op::LeakyRelu { slope } => {
                let s = T::c(*slope);
                let x = inp(0).data();
                vec![Some(zip_map(g, x, |gi, xi| if xi > T::zero() { gi } else { gi * s }))]
            }
            Op::Tanh => vec![Some(zip_map(g, y, |gi, yi| gi * (T::one() - yi * yi)))],
            Op::Sigmoid => vec![Some(zip_map(g, y, |gi, yi| gi * yi * (T::one() - yi)))],
            Op::LogSigmoid => {
                let x = inp(0).data();
                vec![Some(zip_map(g, x, |gi, xi| gi * sigmoid(-xi)))]
            }
            Op::Exp => vec![Some(zip_map(g, y, |gi, yi| gi * yi))],
            Op::Log { floor } => {
                let fl = T::c(*floor);
                let x = inp(0).data();
                vec![Some(zip_map(g, x, |gi, xi| if xi > fl { gi / xi } else { T::zero() }))]
            }
            Op::Abs => {
                let x = inp(0).data();
                vec![Some(zip_map(g, x, |gi, xi| gi * xi.signum() * T::c((xi != T::zero()) as u8 as f64)))]
            }
            Op::Square => {
                let x = inp(0).data();
                vec![Some(zip_map(g, x, |gi, xi| gi * T::c(2.0) * xi))]
            }
            Op::Cos => {
                let x = inp(0).data();
                vec![Some(zip_map(g, x, |gi, xi| -gi * xi.sin()))]
            }
            Op::Magnitude => {
                let z = inp(0).data();
                let mut dz = vec![T::zero(); z.len()];
                for (i, (&gi, &m)) in g.iter().zip(y).enumerate() {
                    if m > T::zero() {
                        dz[2 * i] = gi * z[2 * i] / m;
                        dz[2 * i + 1] = gi * z[2 * i + 1] / m;
                    }
                }
                vec![Some(dz)]
            }
            Op::MaxPool { .. } => {
                let Saved::Indices(arg) = &node.saved else { unreachable!() };
                let mut dx = vec![T::zero(); inp(0).numel()];
                for (&a, &gi) in arg.iter().zip(g) {
                    dx[a] = dx[a] + gi;
                }
                vec![Some(dx)]
            }
            Op::AvgPool { k } => {
                let (n, c, h, w) = dims4(inp(0), "").unwrap();
                let (oh, ow) = (h / k, w / k);
                let inv = T::c(1.0 / (k * k) as f64);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[p * h * w + i * w + j] = g[p * oh * ow + (i / k) * ow + j / k] * inv;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Add => vec![wants(0).then(|| g.to_vec()), wants(1).then(|| g.to_vec())],
            Op::Sub => vec![wants(0).then(|| g.to_vec()), wants(1).then(|| g.iter().map(|&v| -v).collect())],
            Op::Mul => vec![
                wants(0).then(|| zip_map(g, inp(1).data(), |gi, b| gi * b)),
                wants(1).then(|| zip_map(g, inp(0).data(), |gi, a| gi * a)),
            ],
            Op::AddScalar { .. } | Op::Reshape => vec![Some(g.to_vec())],
            Op::Scale { c } => {
                let cc = T::c(*c);
                vec![Some(g.iter().map(|&v| v * cc).collect())]
            }
            Op::SwapAxes { a, b } => vec![Some(permute_swap(g, node.value.shape(), *a, *b))],
            Op::SumAll => vec![Some(vec![g[0]; inp(0).numel()])],
            Op::MeanAll => {
                let n = inp(0).numel();
                vec![Some(vec![g[0] / T::c(n as f64); n])]
            }
            Op::SumTrailing { .. } => {
                let inner = inp(0).numel() / g.len();
                vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v, inner)).collect())]
            }
            Op::MaxTrailing { .. } => {
                let Saved::Indices(arg) = &node.saved else { unreachable!() };
                let mut dx = vec![T::zero(); inp(0).numel()];
                for (&a, &gi) in arg.iter().zip(g) {
                    dx[a] = dx[a] + gi;
                }
                vec![Some(dx)]
            }
            Op::IndexSelect { indices } => {
                let d = *inp(0).shape().last().unwrap();
                let mut dx = vec![T::zero(); inp(0).numel()];
                for (row, grow) in dx.chunks_mut(d).zip(g.chunks(indices.len())) {
                    for (&i, &gi) in indices.iter().zip(grow) {
                        row[i] = row[i] + gi;
                    }
                }
                vec![Some(dx)]
            }
            Op::LogSoftmax => {
                let d = *inp(0).shape().last().unwrap();
                let dx = g
                    .chunks(d)
                    .zip(y.chunks(d))
                    .flat_map(|(gr, yr)| {
                        let gs = gr.iter().fold(T::zero(), |a, &b| a + b);
                        gr.iter().zip(yr).map(move |(&gi, &yi)| gi - yi.exp() * gs)
                    })
                    .collect();
                vec![Some(dx)]
            }
            Op::Dft2 => {
                // Adjoint of (shift . DFT): unshift, then conjugate transform; keep the real part.
                let s = inp(0).shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let mut dx = Vec::with_capacity(inp(0).numel());
                for plane in g.chunks(2 * h * w) {
                    let gr: Vec<T> = plane.iter().step_by(2).copied().collect();
                    let gi: Vec<T> = plane.iter().skip(1).step_by(2).copied().collect();
                    let mut re = spectral::ifftshift(&gr, h, w);
                    let mut im = spectral::ifftshift(&gi, h, w);
                    spectral::fft2(&mut re, &mut im, h, w, true);
                    dx.extend(re);
                }
                vec![Some(dx)]
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, c: usize, p: usize) {
    for ni in 0..n {
        for (ci, &b) in bias.iter().enumerate().take(c) {
            let s = (ni * c + ci) * p;
            out[s..s + p].iter_mut().for_each(|v| *v = *v + b);
        }
    }
}

fn channel_sum<T: Scalar>(g: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let s = (ni * c + ci) * p;
            *o = g[s..s + p].iter().fold(*o, |a, &b| a + b);
        }
    }
    out
}

/// Swap axes `a` and `b` of a row-major array with `shape`.
fn permute_swap<T: Scalar>(x: &[T], shape: &[usize], a: usize, b: usize) -> Vec<T> {
    if a == b {
        return x.to_vec();
    }
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut src_strides = strides.clone();
    src_strides.swap(a, b);
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
