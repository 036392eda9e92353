//! Scaled dot-product attention, multi-head attention, sinusoidal positional
//! encoding and post-norm Transformer encoder/decoder layers.
//!
//! Entity sets are `n×p` matrices whose rows are the entities. The softmax
//! temperature `tau` divides the logits, so standard scaled attention uses
//! `tau = sqrt(d_q)`.
//!
//! Attention is written `softmax(Q·Kᵀ / tau) · V`: the value projection is
//! applied after the softmax, which makes every output row a convex
//! combination of the rows of `V`.

use alloc::vec::Vec;

use rand::RngCore;

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::math;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Projection matrices of one attention head, as graph handles.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Owned projection matrices of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionHeadWeights {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor) -> Result<Self> {
        let (pq, dq) = wq.require_matrix("W_Q")?;
        let (pk, dk) = wk.require_matrix("W_K")?;
        let (pv, _) = wv.require_matrix("W_V")?;
        if dq != dk {
            bail!(Dimension, "W_Q and W_K widths differ: {} vs {}", dq, dk);
        }
        if pq != pk || pq != pv {
            bail!(Dimension, "projection input dims differ: {}, {}, {}", pq, pk, pv);
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn d_q(&self) -> usize {
        self.wq.cols()
    }

    pub fn attach(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        let mut put = |t: &Tensor| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        HeadVars { wq: put(&self.wq), wk: put(&self.wk), wv: put(&self.wv) }
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadVars {
    pub heads: Vec<HeadVars>,
    /// `(B·d_v) × d` output projection.
    pub wo: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadWeights {
    pub heads: Vec<AttentionHeadWeights>,
    pub wo: Tensor,
}

impl MultiHeadWeights {
    pub fn new(heads: Vec<AttentionHeadWeights>, wo: Tensor) -> Result<Self> {
        let Some(first) = heads.first() else { bail!(Dimension, "multi-head attention needs at least one head") };
        let shapes = |h: &AttentionHeadWeights| (h.wq.shape().to_vec(), h.wk.shape().to_vec(), h.wv.shape().to_vec());
        if heads.iter().any(|h| shapes(h) != shapes(first)) {
            bail!(Dimension, "all heads must share projection shapes");
        }
        let (rows, _) = wo.require_matrix("W_O")?;
        if rows != heads.len() * first.wv.cols() {
            bail!(Dimension, "W_O has {} rows, expected B·d_v = {}", rows, heads.len() * first.wv.cols());
        }
        Ok(Self { heads, wo })
    }

    pub fn attach(&self, g: &mut Graph, trainable: bool) -> MultiHeadVars {
        let heads = self.heads.iter().map(|h| h.attach(g, trainable)).collect();
        let wo = if trainable { g.leaf(self.wo.clone()) } else { g.constant(self.wo.clone()) };
        MultiHeadVars { heads, wo }
    }
}

/// How each head turns queries and memory into output rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    /// `softmax(Q·Kᵀ / tau) · V`
    DotProduct { tau: f64 },
    /// Modern-Hopfield retrieval with `n_steps` update iterations.
    Hopfield { beta: f64, n_steps: usize },
}

impl Mechanism {
    /// Scaled dot-product attention for head width `d_q`.
    pub fn scaled(d_q: usize) -> Self {
        Mechanism::DotProduct { tau: math::sqrt(d_q as f64) }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

/// Position-wise feed-forward block `relu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerVars {
    pub self_attention: MultiHeadVars,
    pub ffn: FfnVars,
    pub norm1: NormVars,
    pub norm2: NormVars,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerVars {
    pub self_attention: MultiHeadVars,
    pub cross_attention: MultiHeadVars,
    pub ffn: FfnVars,
    pub norm1: NormVars,
    pub norm2: NormVars,
    pub norm3: NormVars,
}

/// Dropout configuration for a forward pass. Off unless a random stream is
/// supplied and the rate is positive.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut dyn RngCore) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => g.dropout(x, self.rate, rng),
            _ => Ok(x),
        }
    }
}

fn check_entities(g: &Graph, x: Var, what: &str) -> Result<(usize, usize)> {
    g.value(x).require_matrix(what)
}

/// Single-head attention, returning the output and the `n_q × n_m`
/// attention-weight matrix.
pub fn attend_with_weights(g: &mut Graph, queries_src: Var, memory: Var, w: &HeadVars, tau: f64) -> Result<(Var, Var)> {
    let (_, pq) = check_entities(g, queries_src, "query entities")?;
    let (_, pm) = check_entities(g, memory, "memory entities")?;
    if pq != pm {
        bail!(Dimension, "query entity dim {} != memory entity dim {}", pq, pm);
    }
    let q = g.matmul(queries_src, w.wq)?;
    let k = g.matmul(memory, w.wk)?;
    let v = g.matmul(memory, w.wv)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let weights = g.softmax(logits, tau)?;
    let z = g.matmul(weights, v)?;
    Ok((z, weights))
}

/// `softmax(Q·Kᵀ / tau) · V` with `Q = queries_src·W_Q`, `K = memory·W_K`,
/// `V = memory·W_V`.
pub fn attend(g: &mut Graph, queries_src: Var, memory: Var, w: &HeadVars, tau: f64) -> Result<Var> {
    attend_with_weights(g, queries_src, memory, w, tau).map(|(z, _)| z)
}

fn head_forward(g: &mut Graph, queries_src: Var, memory: Var, w: &HeadVars, mech: Mechanism) -> Result<Var> {
    match mech {
        Mechanism::DotProduct { tau } => attend(g, queries_src, memory, w, tau),
        Mechanism::Hopfield { beta, n_steps } => {
            crate::hopfield::hopfield_layer_forward(g, queries_src, memory, w, beta, n_steps)
        }
    }
}

/// `concat(Z⁽¹⁾, …, Z⁽ᴮ⁾) · W_O` with scaled dot-product heads.
pub fn multi_head(g: &mut Graph, queries_src: Var, memory: Var, w: &MultiHeadVars, tau: f64) -> Result<Var> {
    multi_head_with(g, queries_src, memory, w, Mechanism::DotProduct { tau })
}

pub fn multi_head_with(g: &mut Graph, queries_src: Var, memory: Var, w: &MultiHeadVars, mech: Mechanism) -> Result<Var> {
    if w.heads.is_empty() {
        bail!(Dimension, "multi-head attention needs at least one head");
    }
    let outs = w
        .heads
        .iter()
        .map(|h| head_forward(g, queries_src, memory, h, mech))
        .collect::<Result<Vec<_>>>()?;
    let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    g.matmul(cat, w.wo)
}

/// Fixed sinusoidal position table.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    table: Tensor,
}

impl PositionalEncoding {
    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn capacity(&self) -> usize {
        self.table.rows()
    }

    /// First `n` rows.
    pub fn rows(&self, n: usize) -> Result<Tensor> {
        if n == 0 || n > self.capacity() {
            bail!(Dimension, "positional encoding holds {} positions, asked for {}", self.capacity(), n);
        }
        let d = self.table.cols();
        Tensor::new(alloc::vec![n, d], self.table.data()[..n * d].to_vec())
    }
}

/// `table[pos, 2i] = sin(pos / 10000^(2i/d))`, `table[pos, 2i+1] = cos(…)`.
pub fn positional_encoding(n: usize, d: usize) -> Result<PositionalEncoding> {
    if d == 0 || !d.is_multiple_of(2) {
        bail!(Parameter, "positional encoding width must be even and positive, got {}", d);
    }
    if n == 0 {
        bail!(Parameter, "positional encoding needs at least one position");
    }
    let mut data = alloc::vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / math::powf(10000.0, (2 * i) as f64 / d as f64);
            data[pos * d + 2 * i] = math::sin(angle);
            data[pos * d + 2 * i + 1] = math::cos(angle);
        }
    }
    Ok(PositionalEncoding { table: Tensor::new(alloc::vec![n, d], data)? })
}

pub fn ffn_forward(g: &mut Graph, x: Var, f: &FfnVars) -> Result<Var> {
    let h = g.matmul(x, f.w1)?;
    let h = g.add_bias(h, f.b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, f.w2)?;
    g.add_bias(o, f.b2)
}

/// `layer_norm(x + dropout(sub))`
fn residual_norm(g: &mut Graph, x: Var, sub: Var, norm: &NormVars, dropout: &mut Dropout<'_>) -> Result<Var> {
    let sub = dropout.apply(g, sub)?;
    let s = g.add(x, sub)?;
    g.layer_norm(s, norm.gain, norm.bias, LAYER_NORM_EPS)
}

pub fn encoder_layer_forward(
    g: &mut Graph,
    x: Var,
    layer: &EncoderLayerVars,
    mech: Mechanism,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let a = multi_head_with(g, x, x, &layer.self_attention, mech)?;
    let x = residual_norm(g, x, a, &layer.norm1, dropout)?;
    let f = ffn_forward(g, x, &layer.ffn)?;
    residual_norm(g, x, f, &layer.norm2, dropout)
}

/// Adds positional encodings to the entities and runs the encoder stack.
pub fn encoder_forward(
    g: &mut Graph,
    entities: Var,
    layers: &[EncoderLayerVars],
    pe: &PositionalEncoding,
    mech: Mechanism,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let (n, p) = check_entities(g, entities, "encoder input")?;
    if pe.table.cols() != p {
        bail!(Dimension, "positional encoding width {} != entity dim {}", pe.table.cols(), p);
    }
    let pos = g.constant(pe.rows(n)?);
    let mut x = g.add(entities, pos)?;
    for layer in layers {
        x = encoder_layer_forward(g, x, layer, mech, dropout)?;
    }
    Ok(x)
}

pub fn decoder_layer_forward(
    g: &mut Graph,
    q: Var,
    memory: Var,
    layer: &DecoderLayerVars,
    mech: Mechanism,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let a = multi_head_with(g, q, q, &layer.self_attention, mech)?;
    let q = residual_norm(g, q, a, &layer.norm1, dropout)?;
    let c = multi_head_with(g, q, memory, &layer.cross_attention, mech)?;
    let q = residual_norm(g, q, c, &layer.norm2, dropout)?;
    let f = ffn_forward(g, q, &layer.ffn)?;
    residual_norm(g, q, f, &layer.norm3, dropout)
}

/// Runs the decoder stack with the image-representation queries `irq` as
/// the initial query set attending over `memory`.
pub fn decoder_forward(
    g: &mut Graph,
    irq: Var,
    memory: Var,
    layers: &[DecoderLayerVars],
    mech: Mechanism,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let (_, dq) = check_entities(g, irq, "image representation queries")?;
    let (_, dm) = check_entities(g, memory, "decoder memory")?;
    if dq != dm {
        bail!(Dimension, "query dim {} != memory dim {}", dq, dm);
    }
    let mut q = irq;
    for layer in layers {
        q = decoder_layer_forward(g, q, memory, layer, mech, dropout)?;
    }
    Ok(q)
}
