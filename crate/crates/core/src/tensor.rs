//! Dense row-major `f64` tensors and the forward kernels shared by the
//! autodiff graph and the graph-free code paths (Hopfield retrieval,
//! metrics, generators).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;

/// Dense tensor value. `data.len()` always equals the product of `shape`;
/// a scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            bail!(Dimension, "zero extent in shape {:?}", shape);
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Dimension, "shape {:?} needs {} elements, got {}", shape, n, data.len());
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            bail!(Dimension, "ragged or empty rows");
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self { shape: vec![rows.len(), cols], data })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn require_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            bail!(Dimension, "{} must be a matrix, got shape {:?}", what, self.shape);
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul lhs")?;
    let (k2, n) = b.require_matrix("matmul rhs")?;
    if k != k2 {
        bail!(Dimension, "matmul inner extents differ: {}x{} * {}x{}", m, k, k2, n);
    }
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `out += a[m×k] · b[k×n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.require_matrix("transpose input")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor { shape: vec![n, m], data: out })
}

/// `softmax(x / tau)` along the last axis, max-subtracted.
pub fn softmax(x: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) || !tau.is_finite() {
        bail!(Parameter, "softmax temperature must be positive, got {}", tau);
    }
    let c = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(c) {
        softmax_slice(row, tau);
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}

pub(crate) fn softmax_slice(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp((*v - max) / tau);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `beta⁻¹ · log Σ exp(beta · v)`, max-stabilized.
pub fn lse(beta: f64, v: &[f64]) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        bail!(Parameter, "lse inverse temperature must be positive, got {}", beta);
    }
    if v.is_empty() {
        bail!(Parameter, "lse of an empty vector");
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = v.iter().map(|&x| math::exp(beta * (x - max))).sum();
    Ok(max + math::ln(s) / beta)
}

/// Layer normalization over the last axis with population variance.
/// Returns the output together with the normalized values and per-slice
/// inverse standard deviations, which the backward pass reuses.
pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let c = x.last_dim();
    if gain.len() != c || bias.len() != c {
        bail!(
            Dimension,
            "layer_norm gain/bias length {}/{} does not match last axis {}",
            gain.len(),
            bias.len(),
            c
        );
    }
    if !(eps >= 0.0) {
        bail!(Parameter, "layer_norm eps must be nonnegative");
    }
    let mut out = vec![0.0; x.len()];
    let mut normed = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / c);
    for (r, row) in x.data.chunks(c).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / math::sqrt(var + eps);
        inv_std.push(is);
        for j in 0..c {
            let z = (row[j] - mean) * is;
            normed[r * c + j] = z;
            out[r * c + j] = z * gain.data[j] + bias.data[j];
        }
    }
    Ok((Tensor { shape: x.shape.clone(), data: out }, normed, inv_std))
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_parts(x, gain, bias, eps).map(|(t, _, _)| t)
}

/// Concatenation along `axis`; all parts share rank and every other extent.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = match parts.first() {
        Some(t) => *t,
        None => bail!(Dimension, "concat of an empty list"),
    };
    let rank = first.ndim();
    if axis >= rank {
        bail!(Dimension, "concat axis {} out of range for rank {}", axis, rank);
    }
    for p in parts {
        if p.ndim() != rank
            || p.shape.iter().zip(&first.shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            bail!(Dimension, "concat shape mismatch {:?} vs {:?}", p.shape, first.shape);
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total_axis;
    Ok(Tensor { shape, data })
}

/// Mean over `axis`, removing it.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.ndim() {
        bail!(Dimension, "mean axis {} out of range for shape {:?}", axis, x.shape);
    }
    let outer: usize = x.shape[..axis].iter().product();
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            for i in 0..inner {
                data[o * inner + i] += x.data[base + i];
            }
        }
    }
    for v in &mut data {
        *v /= len as f64;
    }
    let mut shape = x.shape.clone();
    shape.remove(axis);
    Ok(Tensor { shape, data })
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

/// Output extent of a convolution along one axis, if the geometry is valid.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

/// Cross-correlation of `input[C×H×W]` with `kernel[O×C×k×k]` plus `bias[O]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::infer(input, kernel, bias, stride, padding)?;
    let mut out = vec![0.0; g.out_c * g.out_h * g.out_w];
    for o in 0..g.out_c {
        let b = bias.data[o];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = b;
                for c in 0..g.in_c {
                    for ky in 0..g.k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let irow = (c * g.in_h + iy as usize) * g.in_w;
                        let krow = ((o * g.in_c + c) * g.k + ky) * g.k;
                        for kx in 0..g.k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            acc += input.data[irow + ix as usize] * kernel.data[krow + kx];
                        }
                    }
                }
                out[(o * g.out_h + oy) * g.out_w + ox] = acc;
            }
        }
    }
    Ok(Tensor { shape: vec![g.out_c, g.out_h, g.out_w], data: out })
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
}

impl ConvGeometry {
    pub fn infer(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        if input.ndim() != 3 {
            bail!(Dimension, "conv2d input must be C×H×W, got {:?}", input.shape);
        }
        if kernel.ndim() != 4 || kernel.shape[2] != kernel.shape[3] {
            bail!(Dimension, "conv2d kernel must be O×C×k×k, got {:?}", kernel.shape);
        }
        let (in_c, in_h, in_w) = (input.shape[0], input.shape[1], input.shape[2]);
        let (out_c, kc, k) = (kernel.shape[0], kernel.shape[1], kernel.shape[2]);
        if kc != in_c {
            bail!(Dimension, "conv2d kernel expects {} channels, input has {}", kc, in_c);
        }
        if bias.len() != out_c {
            bail!(Dimension, "conv2d bias length {} != output channels {}", bias.len(), out_c);
        }
        let (Some(out_h), Some(out_w)) =
            (conv_out_extent(in_h, k, stride, padding), conv_out_extent(in_w, k, stride, padding))
        else {
            bail!(
                Dimension,
                "invalid conv geometry: input {}x{}, kernel {}, stride {}, padding {}",
                in_h,
                in_w,
                k,
                stride,
                padding
            );
        };
        Ok(Self { in_c, in_h, in_w, out_c, out_h, out_w, k })
    }
}
