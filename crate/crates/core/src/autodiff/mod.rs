//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Each operation evaluates its
//! forward value eagerly, stores whatever the backward pass needs, and returns
//! a [`Var`] handle. Parents always have smaller ids than their children, so
//! reverse append order is a valid reverse topological order.

mod check;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub use check::{grad_check, grad_check_multi, GradCheckOptions, GradCheckReport};

use crate::error::{bail, Error, Result};
use crate::tensor::{self, ConvGeometry, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, tau: f64 },
    Lse { x: Var, beta: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Transpose(Var),
    Mean { x: Var, axis: usize },
    Sum(Var),
    Reshape(Var),
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, padding: usize },
    Dropout { x: Var, mask: Vec<f64> },
    SmoothL1 { pred: Var, target: Tensor, beta: f64 },
    Bce { probs: Var, target: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Binary(..) => "elementwise",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::Lse { .. } => "lse",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Transpose(..) => "transpose",
            Op::Mean { .. } => "mean",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::Dropout { .. } => "dropout",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Bce { .. } => "bce_multilabel",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax { x, .. }
            | Op::Lse { x, .. }
            | Op::Transpose(x)
            | Op::Mean { x, .. }
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::Dropout { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
            Op::SmoothL1 { pred, .. } => vec![*pred],
            Op::Bce { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zero when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient-enabled input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().into()));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            bail!(Dimension, "elementwise shape mismatch {:?} vs {:?}", ta.shape(), tb.shape());
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(v, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    /// `x + bias` with `bias` broadcast over the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.last_dim();
        if tb.len() != c {
            bail!(Dimension, "bias length {} != last axis {}", tb.len(), c);
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(v, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(tensor::sigmoid_scalar);
        self.push(v, Op::Sigmoid(x))
    }

    /// `softmax(x / tau)` along the last axis.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let v = tensor::softmax(self.value(x), tau)?;
        self.push(v, Op::Softmax { x, tau })
    }

    /// Scalar log-sum-exp over all elements of `x`.
    pub fn lse(&mut self, x: Var, beta: f64) -> Result<Var> {
        let v = tensor::lse(beta, self.value(x).data())?;
        self.push(Tensor::scalar(v), Op::Lse { x, beta })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, normed, inv_std) =
            tensor::layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.push(v, Op::LayerNorm { x, gain, bias, normed, inv_std })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat(&values, axis)?;
        self.push(v, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = tensor::transpose(self.value(x))?;
        self.push(v, Op::Transpose(x))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = tensor::mean_axis(self.value(x), axis)?;
        self.push(v, Op::Mean { x, axis })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = tensor::conv2d(self.value(input), self.value(kernel), self.value(bias), stride, padding)?;
        self.push(v, Op::Conv2d { input, kernel, bias, stride, padding })
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Parameter, "dropout rate must lie in [0, 1), got {}", rate);
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(v, Op::Dropout { x, mask })
    }

    /// Mean smooth-L1 loss between `pred` and a fixed target.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, beta: f64) -> Result<Var> {
        let loss = crate::training::loss::smooth_l1(target, self.value(pred), beta)?;
        self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, target: target.clone(), beta })
    }

    /// Mean binary cross-entropy of probabilities against binary targets.
    pub fn bce_multilabel(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let loss = crate::training::loss::bce_multilabel(self.value(probs), target)?;
        self.push(Tensor::scalar(loss), Op::Bce { probs, target: target.clone() })
    }

    /// Reverse accumulation from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if !out.value.is_scalar() {
            bail!(Contract, "backward needs a scalar output, got shape {:?}", out.value.shape());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if out.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for id in (0..=output.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &dy, &mut grads)?;
            grads[id] = Some(dy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                acc(*a, &|g| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[i * n + j] * tb.data()[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &|g| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[p * n + j] += av * dy[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                match kind {
                    BinaryKind::Add => {
                        acc(*a, &|g| add_into(g, dy));
                        acc(*b, &|g| add_into(g, dy));
                    }
                    BinaryKind::Sub => {
                        acc(*a, &|g| add_into(g, dy));
                        acc(*b, &|g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
                    }
                    BinaryKind::Mul => {
                        acc(*a, &|g| {
                            for ((g, d), y) in g.iter_mut().zip(dy).zip(tb.data()) {
                                *g += d * y;
                            }
                        });
                        acc(*b, &|g| {
                            for ((g, d), x) in g.iter_mut().zip(dy).zip(ta.data()) {
                                *g += d * x;
                            }
                        });
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let c = self.value(*bias).len();
                acc(*x, &|g| add_into(g, dy));
                acc(*bias, &|g| {
                    for row in dy.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d)),
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(*x, &|g| {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(tx.data()) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &|g| {
                    for ((g, d), s) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * s * (1.0 - s);
                    }
                });
            }
            Op::Softmax { x, tau } => {
                let y = node.value.data();
                let c = node.value.last_dim();
                acc(*x, &|g| {
                    for ((gr, dr), yr) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - dot) / tau;
                        }
                    }
                });
            }
            Op::Lse { x, beta } => {
                let tx = self.value(*x);
                let w = tensor::softmax(&Tensor::vector(tx.data().to_vec()), 1.0 / beta)?;
                acc(*x, &|g| {
                    for (g, p) in g.iter_mut().zip(w.data()) {
                        *g += dy[0] * p;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let tg = self.value(*gain);
                let c = tg.len();
                acc(*x, &|g| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let dr = &dy[r * c..(r + 1) * c];
                        let zr = &normed[r * c..(r + 1) * c];
                        let mut sum_dz = 0.0;
                        let mut sum_dz_z = 0.0;
                        for j in 0..c {
                            let dz = dr[j] * tg.data()[j];
                            sum_dz += dz;
                            sum_dz_z += dz * zr[j];
                        }
                        for j in 0..c {
                            let dz = dr[j] * tg.data()[j];
                            g[r * c + j] += is / c as f64 * (c as f64 * dz - sum_dz - zr[j] * sum_dz_z);
                        }
                    }
                });
                acc(*gain, &|g| {
                    for (dr, zr) in dy.chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            g[j] += dr[j] * zr[j];
                        }
                    }
                });
                acc(*bias, &|g| {
                    for dr in dy.chunks(c) {
                        add_into(g, dr);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(*p).shape()[*axis] * inner;
                    acc(*p, &|g| {
                        for o in 0..outer {
                            let src = &dy[o * total + offset..o * total + offset + chunk];
                            add_into(&mut g[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                acc(*x, &|g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += dy[j * m + i];
                        }
                    }
                });
            }
            Op::Mean { x, axis } => {
                let shape = self.value(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                acc(*x, &|g| {
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                g[(o * len + a) * inner + i] += dy[o * inner + i] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|g| g.iter_mut().for_each(|g| *g += dy[0])),
            Op::Reshape(x) => acc(*x, &|g| add_into(g, dy)),
            Op::Conv2d { input, kernel, bias, stride, padding } => {
                let (ti, tk, tb) = (self.value(*input), self.value(*kernel), self.value(*bias));
                let geo = ConvGeometry::infer(ti, tk, tb, *stride, *padding)?;
                conv2d_backward(ti, tk, dy, geo, *stride, *padding, &mut acc, *input, *kernel, *bias);
            }
            Op::Dropout { x, mask } => {
                acc(*x, &|g| {
                    for ((g, d), m) in g.iter_mut().zip(dy).zip(mask) {
                        *g += d * m;
                    }
                });
            }
            Op::SmoothL1 { pred, target, beta } => {
                let tp = self.value(*pred);
                let n = tp.len() as f64;
                acc(*pred, &|g| {
                    for ((g, p), t) in g.iter_mut().zip(tp.data()).zip(target.data()) {
                        let diff = p - t;
                        let slope = if diff.abs() < *beta { diff / beta } else { diff.signum() };
                        *g += dy[0] * slope / n;
                    }
                });
            }
            Op::Bce { probs, target } => {
                let tp = self.value(*probs);
                let n = tp.len() as f64;
                acc(*probs, &|g| {
                    for ((g, &p), &t) in g.iter_mut().zip(tp.data()).zip(target.data()) {
                        let lo = crate::training::loss::BCE_CLAMP;
                        if p <= lo || p >= 1.0 - lo {
                            continue;
                        }
                        *g += dy[0] * (-t / p + (1.0 - t) / (1.0 - p)) / n;
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (g, d) in g.iter_mut().zip(d) {
        *g += d;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    ti: &Tensor,
    tk: &Tensor,
    dy: &[f64],
    geo: ConvGeometry,
    stride: usize,
    padding: usize,
    acc: &mut impl FnMut(Var, &dyn Fn(&mut [f64])),
    input: Var,
    kernel: Var,
    bias: Var,
) {
    let ConvGeometry { in_c, in_h, in_w, out_c, out_h, out_w, k } = geo;
    // Visits every (output, input, kernel) index triple touched by the forward pass.
    let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
        for o in 0..out_c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let oi = (o * out_h + oy) * out_w + ox;
                    for c in 0..in_c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= in_h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= in_w as isize {
                                    continue;
                                }
                                let ii = (c * in_h + iy as usize) * in_w + ix as usize;
                                let ki = ((o * in_c + c) * k + ky) * k + kx;
                                f(oi, ii, ki);
                            }
                        }
                    }
                }
            }
        }
    };
    acc(input, &|g| visit(&mut |oi, ii, ki| g[ii] += dy[oi] * tk.data()[ki]));
    acc(kernel, &|g| visit(&mut |oi, ii, ki| g[ki] += dy[oi] * ti.data()[ii]));
    acc(bias, &|g| {
        for o in 0..out_c {
            g[o] += dy[o * out_h * out_w..(o + 1) * out_h * out_w].iter().sum::<f64>();
        }
    });
}
