//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node whose inputs already exist, so node ids are a
//! topological order and backward is a single reverse sweep.

use super::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Norm floor shared by euclidean distance, cosine similarity and row normalisation.
pub const NORM_FLOOR: f64 = 1e-12;
/// Probabilities are clamped to `[PROB_FLOOR, 1]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        input: Var,
        targets: Vec<usize>,
        input_is_probs: bool,
    },
    Euclidean(Var, Var),
    Cosine(Var, Var),
    NormalizeRows(Var),
    SliceCols {
        input: Var,
        start: usize,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::MaxPool2d { input, .. } | Op::GlobalAvgPool { input } => vec![*input],
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SoftmaxRows(x)
            | Op::NormalizeRows(x)
            | Op::Reshape(x) => vec![*x],
            Op::CrossEntropy { input, .. } => vec![*input],
            Op::SliceCols { input, .. } | Op::GatherRows { input, .. } => vec![*input],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Euclidean(a, b) | Op::Cosine(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    /// True when any gradient can flow through this node.
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a `requires_grad` leaf (zeros if the loss does not depend on it).
    /// `None` for constants.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Computation graph recording ops on `f32` or `f64` tensors.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backpropagated: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, a, b));
    }
    Ok(())
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::invalid(op, format!("expected rank-2 tensor, got shape {shape:?}"))),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        let ([b, c, h, w], [f, kc, kh, kw]) = (xs.as_slice(), ks.as_slice()) else {
            return Err(Error::shape("conv2d", &xs, &ks));
        };
        let (b, c, h, w, f, kc, kh, kw) = (*b, *c, *h, *w, *f, *kc, *kh, *kw);
        if c != kc {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if bs != [f] {
            return Err(Error::shape("conv2d", &ks, &bs));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        if !self.value(input).is_finite() {
            return Err(Error::NonFinite("conv2d input".into()));
        }
        let geom = ConvGeometry {
            batch: b,
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_parts(vec![b, f, geom.out_h(), geom.out_w()], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let [b, c, h, w] = xs.as_slice() else {
            return Err(Error::invalid("maxpool2d", format!("expected rank-4 input, got {xs:?}")));
        };
        let (b, c, h, w) = (*b, *c, *h, *w);
        if k == 0 || stride == 0 {
            return Err(Error::invalid("maxpool2d", "window and stride must be positive"));
        }
        if k > h || k > w {
            return Err(Error::invalid(
                "maxpool2d",
                format!("window {k} larger than input {h}x{w}"),
            ));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(input).data(), b * c, h, w, k, stride);
        let shape = vec![b, c, (h - k) / stride + 1, (w - k) / stride + 1];
        Ok(self.push(Tensor::from_parts(shape, out), Op::MaxPool2d { input, argmax }))
    }

    /// `[B,C,H,W] -> [B,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let [b, c, h, w] = xs.as_slice() else {
            return Err(Error::invalid("global_avg_pool", format!("expected rank-4 input, got {xs:?}")));
        };
        let spatial = h * w;
        let inv = scalar::<T>(1.0 / spatial as f64);
        let out = self
            .value(input)
            .data()
            .chunks(spatial)
            .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![*b, *c], out), Op::GlobalAvgPool { input }))
    }

    /// `input · weightᵀ + bias`, with `input: [B,D]`, `weight: [E,D]`, `bias: [E]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (bsz, d) = rank2("linear", self.shape(input))?;
        let (e, wd) = rank2("linear", self.shape(weight))?;
        if d != wd {
            return Err(Error::shape("linear", self.shape(input), self.shape(weight)));
        }
        let mut out = kernels::matmul_nt(self.value(input).data(), self.value(weight).data(), bsz, d, e);
        if let Some(bias) = bias {
            if self.shape(bias) != [e] {
                return Err(Error::shape("linear", self.shape(weight), self.shape(bias)));
            }
            let bv = self.value(bias).data();
            for row in out.chunks_mut(e) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o = *o + bb;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![bsz, e], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// `a · b` for `a: [M,K]`, `b: [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [M,K]`, `b: [N,K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = rank2("matmul", self.shape(a))?;
        let (r, c) = rank2("matmul", self.shape(b))?;
        let (kb, n) = if transpose_b { (c, r) } else { (r, c) };
        if k != kb {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = if transpose_b {
            kernels::matmul_nt(av, bv, m, k, n)
        } else {
            kernels::matmul_nn(av, bv, m, k, n)
        };
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, transpose_b }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = scalar::<T>(factor);
        self.unary(x, move |v| v * f, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let o = scalar::<T>(offset);
        self.unary(x, move |v| v + o, Op::AddScalar(x))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.value(x).sum() / scalar::<T>(n as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rank2("softmax_rows", self.shape(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(value, Op::SoftmaxRows(x)))
    }

    /// Mean negative log-likelihood of the true class.
    ///
    /// With `input_is_probs` the rows are taken as probabilities (clamped to
    /// `[1e-12, 1]`), otherwise as logits passed through a log-softmax.
    pub fn softmax_cross_entropy(&mut self, input: Var, one_hot: &Tensor<T>, input_is_probs: bool) -> Result<Var> {
        let (rows, cols) = rank2("softmax_cross_entropy", self.shape(input))?;
        same_shape("softmax_cross_entropy", self.shape(input), one_hot.shape())?;
        let targets = one_hot_targets(one_hot)?;
        let x = self.value(input).data();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * cols..(r + 1) * cols];
            if input_is_probs {
                let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| v.as_f64() < 0.0) {
                    return Err(Error::invalid(
                        "softmax_cross_entropy",
                        format!("row {r} is not a probability vector (sum {s})"),
                    ));
                }
                let p = row[t].as_f64().clamp(PROB_FLOOR, 1.0);
                total -= p.ln();
            } else {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
                total += lse - row[t].as_f64();
            }
        }
        let loss = total / rows as f64;
        Ok(self.push(
            Tensor::scalar(scalar(loss)),
            Op::CrossEntropy {
                input,
                targets,
                input_is_probs,
            },
        ))
    }

    /// Per-row L2 distance `[B,D] x [B,D] -> [B]`.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("euclidean_distance", self.shape(a), self.shape(b))?;
        let (rows, cols) = rank2("euclidean_distance", self.shape(a))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..rows)
            .map(|r| {
                let s = av[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(&bv[r * cols..(r + 1) * cols])
                    .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
                s.sqrt()
            })
            .collect();
        Ok(self.push(Tensor::from_parts(vec![rows], out), Op::Euclidean(a, b)))
    }

    /// Per-row cosine similarity with norms floored at `1e-12`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("cosine_similarity", self.shape(a), self.shape(b))?;
        let (rows, cols) = rank2("cosine_similarity", self.shape(a))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let floor = scalar::<T>(NORM_FLOOR);
        let out = (0..rows)
            .map(|r| {
                let (x, y) = (&av[r * cols..(r + 1) * cols], &bv[r * cols..(r + 1) * cols]);
                let dot = dot(x, y);
                let nx = dot_self(x).sqrt().max(floor);
                let ny = dot_self(y).sqrt().max(floor);
                dot / (nx * ny)
            })
            .collect();
        Ok(self.push(Tensor::from_parts(vec![rows], out), Op::Cosine(a, b)))
    }

    /// Divide each row by its (floored) L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rank2("normalize_rows", self.shape(x))?;
        let floor = scalar::<T>(NORM_FLOOR);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            let n = dot_self(row).sqrt().max(floor);
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        Ok(self.push(value, Op::NormalizeRows(x)))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rank2("slice_cols", self.shape(x))?;
        if len == 0 || start + len > cols {
            return Err(Error::invalid(
                "slice_cols",
                format!("columns {start}..{} out of range for width {cols}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, len], out), Op::SliceCols { input: x, start }))
    }

    /// Select (possibly repeated) rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = rank2("gather_rows", self.shape(x))?;
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "no rows selected"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), cols], out),
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (rows, _) = rank2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rank2("concat_cols", self.shape(p))?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, cols) = rank2("concat_rows", self.shape(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = rank2("concat_rows", self.shape(p))?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every `requires_grad` leaf receives a gradient (zeros when unused).
    /// A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backpropagated = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    Tensor::from_parts(node.value.shape().to_vec(), data)
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want = (self.tracked(*input), self.tracked(*kernel), self.tracked(*bias));
                let cg = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    want,
                );
                if let Some(d) = cg.input {
                    accumulate(grads, *input, d);
                }
                if let Some(d) = cg.kernel {
                    accumulate(grads, *kernel, d);
                }
                if let Some(d) = cg.bias {
                    accumulate(grads, *bias, d);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] = d[src] + gv;
                }
                accumulate(grads, *input, d);
            }
            Op::GlobalAvgPool { input } => {
                let xs = self.shape(*input);
                let spatial = xs[2] * xs[3];
                let inv = scalar::<T>(1.0 / spatial as f64);
                let mut d = Vec::with_capacity(self.value(*input).numel());
                for &gv in g {
                    d.extend(std::iter::repeat(gv * inv).take(spatial));
                }
                accumulate(grads, *input, d);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (bsz, din) = (xs[0], xs[1]);
                let e = self.shape(*weight)[0];
                if self.tracked(*input) {
                    // dX = G · W
                    let d = kernels::matmul_nn(g, self.value(*weight).data(), bsz, e, din);
                    accumulate(grads, *input, d);
                }
                if self.tracked(*weight) {
                    // dW = Gᵀ · X
                    let d = kernels::matmul_tn(g, self.value(*input).data(), e, bsz, din);
                    accumulate(grads, *weight, d);
                }
                if let Some(bias) = bias {
                    if self.tracked(*bias) {
                        let mut d = vec![T::zero(); e];
                        for row in g.chunks(e) {
                            for (a, &v) in d.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                        accumulate(grads, *bias, d);
                    }
                }
            }
            Op::MatMul { a, b, transpose_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    let d = if *transpose_b {
                        // B: [N,K]; dA = G · B
                        kernels::matmul_nn(g, bv, m, n, k)
                    } else {
                        // B: [K,N]; dA = G · Bᵀ
                        kernels::matmul_nt(g, bv, m, n, k)
                    };
                    accumulate(grads, *a, d);
                }
                if self.tracked(*b) {
                    let d = if *transpose_b {
                        // dB = Gᵀ · A  -> [N,K]
                        kernels::matmul_tn(g, av, n, m, k)
                    } else {
                        // dB = Aᵀ · G  -> [K,N]
                        kernels::matmul_tn(av, g, k, m, n)
                    };
                    accumulate(grads, *b, d);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = out.iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = out.iter().zip(g).map(|(&t, &gv)| gv * (T::one() - t * t)).collect();
                accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                accumulate_if(self, grads, *a, || g.to_vec());
                accumulate_if(self, grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate_if(self, grads, *a, || g.to_vec());
                accumulate_if(self, grads, *b, || g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                accumulate_if(self, grads, *a, || g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
                accumulate_if(self, grads, *b, || g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
            }
            Op::Scale(x, f) => {
                let f = scalar::<T>(*f);
                accumulate(grads, *x, g.iter().map(|&v| v * f).collect());
            }
            Op::AddScalar(x) => accumulate(grads, *x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / scalar::<T>(n as f64); n]);
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.shape()[1];
                let mut d = Vec::with_capacity(out.len());
                for (s, gr) in out.chunks(cols).zip(g.chunks(cols)) {
                    let inner = dot(s, gr);
                    d.extend(s.iter().zip(gr).map(|(&si, &gi)| si * (gi - inner)));
                }
                accumulate(grads, *x, d);
            }
            Op::CrossEntropy {
                input,
                targets,
                input_is_probs,
            } => {
                let xs = self.shape(*input);
                let (rows, cols) = (xs[0], xs[1]);
                let xv = self.value(*input).data();
                let scale = g[0] / scalar::<T>(rows as f64);
                let mut d = vec![T::zero(); rows * cols];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let dr = &mut d[r * cols..(r + 1) * cols];
                    if *input_is_probs {
                        let p = row[t].as_f64();
                        if p >= PROB_FLOOR {
                            dr[t] = -scale / row[t];
                        }
                    } else {
                        let max = row.iter().fold(row[0], |m, &v| m.max(v));
                        let mut sm: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
                        let z = sm.iter().fold(T::zero(), |a, &v| a + v);
                        sm.iter_mut().for_each(|v| *v = *v / z);
                        for (j, (dj, &pj)) in dr.iter_mut().zip(&sm).enumerate() {
                            let y = if j == t { T::one() } else { T::zero() };
                            *dj = scale * (pj - y);
                        }
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::Euclidean(a, b) => {
                let cols = self.shape(*a)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); av.len()];
                for (r, (&dist, &gv)) in out.iter().zip(g).enumerate() {
                    // zero distance: gradient defined as zero
                    if dist <= T::zero() {
                        continue;
                    }
                    let f = gv / dist;
                    for j in r * cols..(r + 1) * cols {
                        da[j] = f * (av[j] - bv[j]);
                    }
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, da.iter().map(|&v| -v).collect());
                }
                if self.tracked(*a) {
                    accumulate(grads, *a, da);
                }
            }
            Op::Cosine(a, b) => {
                let cols = self.shape(*a)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let floor = scalar::<T>(NORM_FLOOR);
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for (r, &gv) in g.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (x, y) = (&av[span.clone()], &bv[span.clone()]);
                    let (rnx, rny) = (dot_self(x).sqrt(), dot_self(y).sqrt());
                    let (nx, ny) = (rnx.max(floor), rny.max(floor));
                    let d = dot(x, y);
                    // d/dx [x·y / (max(|x|,f) max(|y|,f))]
                    let cx = if rnx > floor { d / (nx * nx * nx * ny) } else { T::zero() };
                    let cy = if rny > floor { d / (nx * ny * ny * ny) } else { T::zero() };
                    for (j, idx) in span.enumerate() {
                        da[idx] = gv * (y[j] / (nx * ny) - cx * x[j]);
                        db[idx] = gv * (x[j] / (nx * ny) - cy * y[j]);
                    }
                }
                accumulate_if(self, grads, *a, || da);
                accumulate_if(self, grads, *b, || db);
            }
            Op::NormalizeRows(x) => {
                let cols = node.value.shape()[1];
                let xv = self.value(*x).data();
                let floor = scalar::<T>(NORM_FLOOR);
                let mut d = Vec::with_capacity(xv.len());
                for ((xr, yr), gr) in xv.chunks(cols).zip(out.chunks(cols)).zip(g.chunks(cols)) {
                    let raw = dot_self(xr).sqrt();
                    let n = raw.max(floor);
                    if raw > floor {
                        let inner = dot(yr, gr);
                        d.extend(yr.iter().zip(gr).map(|(&y, &gv)| (gv - y * inner) / n));
                    } else {
                        d.extend(gr.iter().map(|&gv| gv / n));
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::SliceCols { input, start } => {
                let (rows, cols) = (self.shape(*input)[0], self.shape(*input)[1]);
                let len = node.value.shape()[1];
                let mut d = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(grads, *input, d);
            }
            Op::GatherRows { input, rows } => {
                let cols = self.shape(*input)[1];
                let mut d = vec![T::zero(); self.value(*input).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        d[r * cols + j] = d[r * cols + j] + g[i * cols + j];
                    }
                }
                accumulate(grads, *input, d);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.tracked(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.tracked(p) {
                        accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], var: Var, d: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(d) {
                *e = *e + v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn accumulate_if<T: Element>(graph: &Graph<T>, grads: &mut [Option<Vec<T>>], var: Var, d: impl FnOnce() -> Vec<T>) {
    if graph.tracked(var) {
        accumulate(grads, var, d());
    }
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn dot_self<T: Element>(a: &[T]) -> T {
    dot(a, a)
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / z);
}

/// Validate one-hot rows and return the hot index per row.
pub fn one_hot_targets<T: Element>(one_hot: &Tensor<T>) -> Result<Vec<usize>> {
    let (rows, cols) = rank2("one_hot", one_hot.shape())?;
    (0..rows)
        .map(|r| {
            let row = &one_hot.data()[r * cols..(r + 1) * cols];
            let ones: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == T::one())
                .map(|(i, _)| i)
                .collect();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones.len() != 1 || zeros != cols - 1 {
                return Err(Error::invalid("one_hot", format!("row {r} is not one-hot")));
            }
            Ok(ones[0])
        })
        .collect()
}
