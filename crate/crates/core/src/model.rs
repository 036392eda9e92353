//! Model assembly: baseline CNN, Transformer hybrid (HCT) and Hopfield
//! hybrid (HCH), each with a pre-training or severity head.
//!
//! All three share the backbone and head parameter names, and the two hybrid
//! kinds share every attention parameter name, so one checkpoint can be run
//! under either attention mechanism and weights can move between kinds.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, DecoderLayerVars, Dropout, EncoderLayerVars, FfnVars, HeadVars, Mechanism, MultiHeadVars, NormVars,
};
use crate::autodiff::{Graph, Var};
use crate::backbone::{self, BackboneSpec, BackboneVars, ConvVars};
use crate::error::{bail, Result};
use crate::math;
use crate::rng::{self, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    Transformer,
    Hopfield,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "pretrain_15")]
    Pretrain15,
    #[serde(rename = "severity_2")]
    Severity2,
}

impl HeadKind {
    pub fn output_dim(self) -> usize {
        match self {
            HeadKind::Pretrain15 => 15,
            HeadKind::Severity2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Random,
    Pretrained,
    Finetuned,
}

fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_d() -> usize {
    64
}
fn default_m() -> usize {
    4
}
fn default_steps() -> usize {
    1
}
fn default_dropout() -> f64 {
    0.1
}
fn default_head() -> HeadKind {
    HeadKind::Severity2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub backbone: BackboneSpec,
    pub attention_kind: AttentionKind,
    #[serde(default = "default_layers")]
    pub encoder_layers: usize,
    #[serde(default = "default_layers")]
    pub decoder_layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Entity / model width; also the MLP head's hidden width.
    #[serde(default = "default_d")]
    pub d: usize,
    /// Number of image-representation queries.
    #[serde(default = "default_m")]
    pub m: usize,
    /// Feed-forward hidden width, `4·d` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<usize>,
    /// Hopfield inverse temperature, `1/sqrt(d_head)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Severity head unless stated; pre-training swaps in the proxy head.
    #[serde(default = "default_head")]
    pub head_kind: HeadKind,
}

impl ModelSpec {
    /// Default toy configuration for the given attention and head kinds.
    pub fn toy(attention_kind: AttentionKind, head_kind: HeadKind) -> Self {
        Self {
            backbone: BackboneSpec::default(),
            attention_kind,
            encoder_layers: default_layers(),
            decoder_layers: default_layers(),
            heads: default_heads(),
            d: default_d(),
            m: default_m(),
            ffn_hidden: None,
            beta: None,
            n_steps: default_steps(),
            dropout: default_dropout(),
            head_kind,
        }
    }

    pub fn is_hybrid(&self) -> bool {
        self.attention_kind != AttentionKind::None
    }

    pub fn d_head(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d)
    }

    pub fn hopfield_beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| 1.0 / math::sqrt(self.d_head() as f64))
    }

    pub fn mechanism(&self) -> Mechanism {
        match self.attention_kind {
            AttentionKind::Hopfield => Mechanism::Hopfield { beta: self.hopfield_beta(), n_steps: self.n_steps },
            _ => Mechanism::scaled(self.d_head()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.feature_geometry()?;
        if self.d == 0 {
            bail!(Config, "d must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must lie in [0, 1), got {}", self.dropout);
        }
        if !self.is_hybrid() {
            return Ok(());
        }
        if self.backbone.projection != self.d {
            bail!(Config, "backbone projection {} must equal d = {} for hybrid models", self.backbone.projection, self.d);
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            bail!(Config, "d = {} must be divisible by heads = {}", self.d, self.heads);
        }
        if !self.d.is_multiple_of(2) {
            bail!(Config, "d must be even for the positional encoding");
        }
        if self.m == 0 {
            bail!(Config, "at least one image-representation query is required");
        }
        if self.ffn_width() == 0 {
            bail!(Config, "ffn_hidden must be positive");
        }
        if self.n_steps == 0 {
            bail!(Config, "n_steps must be at least 1");
        }
        let beta = self.hopfield_beta();
        if !(beta > 0.0) || !beta.is_finite() {
            bail!(Config, "beta must be positive, got {}", beta);
        }
        Ok(())
    }

    /// Every parameter with its shape and initialization rule, in a fixed
    /// order that [`init`] draws in.
    pub fn params(&self) -> Result<Vec<ParamInfo>> {
        self.validate()?;
        let mut out = Vec::new();
        for (name, shape) in self.backbone.param_shapes()? {
            let init = if shape.len() == 4 {
                let rf = shape[2] * shape[3];
                Init::Uniform { fan_in: shape[1] * rf, fan_out: shape[0] * rf }
            } else {
                Init::Zeros
            };
            out.push(ParamInfo { name, shape, init });
        }
        if self.is_hybrid() {
            let (d, dh, f) = (self.d, self.d_head(), self.ffn_width());
            let attn = |out: &mut Vec<ParamInfo>, prefix: &str| {
                for h in 0..self.heads {
                    for w in ["wq", "wk", "wv"] {
                        out.push(ParamInfo::dense(format!("{prefix}.head{h}.{w}"), d, dh));
                    }
                }
                out.push(ParamInfo::dense(format!("{prefix}.wo"), self.heads * dh, d));
            };
            let ffn = |out: &mut Vec<ParamInfo>, prefix: &str| {
                out.push(ParamInfo::dense(format!("{prefix}.ffn.w1"), d, f));
                out.push(ParamInfo::zeros(format!("{prefix}.ffn.b1"), f));
                out.push(ParamInfo::dense(format!("{prefix}.ffn.w2"), f, d));
                out.push(ParamInfo::zeros(format!("{prefix}.ffn.b2"), d));
            };
            let norm = |out: &mut Vec<ParamInfo>, prefix: &str, which: usize| {
                out.push(ParamInfo { name: format!("{prefix}.norm{which}.gain"), shape: alloc::vec![d], init: Init::Ones });
                out.push(ParamInfo::zeros(format!("{prefix}.norm{which}.bias"), d));
            };
            for l in 0..self.encoder_layers {
                let p = format!("encoder.{l}");
                attn(&mut out, &format!("{p}.self"));
                ffn(&mut out, &p);
                norm(&mut out, &p, 1);
                norm(&mut out, &p, 2);
            }
            for l in 0..self.decoder_layers {
                let p = format!("decoder.{l}");
                attn(&mut out, &format!("{p}.self"));
                attn(&mut out, &format!("{p}.cross"));
                ffn(&mut out, &p);
                for k in 1..=3 {
                    norm(&mut out, &p, k);
                }
            }
            out.push(ParamInfo { name: "irq".into(), shape: alloc::vec![self.m, d], init: Init::Normal { sd: 0.02 } });
        }
        out.extend(self.head_params());
        Ok(out)
    }

    fn head_params(&self) -> Vec<ParamInfo> {
        let input = if self.is_hybrid() { self.d } else { self.backbone.projection };
        let outd = self.head_kind.output_dim();
        alloc::vec![
            ParamInfo::dense("head.w1".into(), input, self.d),
            ParamInfo::zeros("head.b1".into(), self.d),
            ParamInfo::dense("head.w2".into(), self.d, outd),
            ParamInfo::zeros("head.b2".into(), outd),
        ]
    }
}

pub const HEAD_PREFIX: &str = "head.";

pub fn is_head_param(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    Uniform { fan_in: usize, fan_out: usize },
    Normal { sd: f64 },
    Zeros,
    Ones,
}

impl Init {
    pub fn bound(self) -> f64 {
        match self {
            Init::Uniform { fan_in, fan_out } => math::sqrt(6.0 / (fan_in + fan_out) as f64),
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::Normal { .. } => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamInfo {
    fn dense(name: String, rows: usize, cols: usize) -> Self {
        Self { name, shape: alloc::vec![rows, cols], init: Init::Uniform { fan_in: rows, fan_out: cols } }
    }

    fn zeros(name: String, n: usize) -> Self {
        Self { name, shape: alloc::vec![n], init: Init::Zeros }
    }
}

/// Named weight tensors, ordered by name.
pub type Weights = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    spec: ModelSpec,
    weights: Weights,
    pub seed: u64,
    pub phase: Phase,
}

impl Checkpoint {
    /// Validates that `weights` holds exactly the spec's parameters with
    /// matching shapes.
    pub fn new(spec: ModelSpec, weights: Weights, seed: u64, phase: Phase) -> Result<Self> {
        let params = spec.params()?;
        if params.len() != weights.len() {
            bail!(Config, "spec declares {} weights, checkpoint has {}", params.len(), weights.len());
        }
        for p in &params {
            match weights.get(&p.name) {
                None => bail!(Config, "missing weight {}", p.name),
                Some(t) if t.shape() != p.shape.as_slice() => {
                    bail!(Config, "weight {} has shape {:?}, expected {:?}", p.name, t.shape(), p.shape)
                }
                Some(t) if !t.all_finite() => bail!(Config, "weight {} has non-finite entries", p.name),
                _ => {}
            }
        }
        Ok(Self { spec, weights, seed, phase })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Replaces the weights, keeping names and shapes fixed.
    pub fn set_weights(&mut self, weights: Weights) -> Result<()> {
        *self = Checkpoint::new(self.spec.clone(), weights, self.seed, self.phase)?;
        Ok(())
    }

    /// Updates the weights in place. The closure must keep names and shapes;
    /// the checkpoint is revalidated only for non-finite values.
    pub(crate) fn update_weights(&mut self, f: impl FnOnce(&mut Weights) -> Result<()>) -> Result<()> {
        f(&mut self.weights)?;
        if let Some((name, _)) = self.weights.iter().find(|(_, t)| !t.all_finite()) {
            bail!(NonFinite, "weight {} became non-finite", name);
        }
        Ok(())
    }

    pub fn into_parts(self) -> (ModelSpec, Weights) {
        (self.spec, self.weights)
    }
}

pub fn init(spec: &ModelSpec, seed: u64) -> Result<Checkpoint> {
    let mut rng = rng::seeded(seed, stream::INIT);
    let weights = draw(&spec.params()?, &mut rng)?;
    Checkpoint::new(spec.clone(), weights, seed, Phase::Random)
}

fn draw(params: &[ParamInfo], rng: &mut impl rand::Rng) -> Result<Weights> {
    let mut weights = Weights::new();
    for p in params {
        let n: usize = p.shape.iter().product();
        let data: Vec<f64> = match p.init {
            Init::Uniform { .. } => {
                let a = p.init.bound();
                (0..n).map(|_| rng.gen_range(-a..=a)).collect()
            }
            Init::Normal { sd } => (0..n).map(|_| rng::normal(rng, 0.0, sd)).collect(),
            Init::Zeros => alloc::vec![0.0; n],
            Init::Ones => alloc::vec![1.0; n],
        };
        weights.insert(p.name.clone(), Tensor::new(p.shape.clone(), data)?);
    }
    Ok(weights)
}

/// Builds a checkpoint for `target` that keeps every non-head weight of
/// `source` whose name and shape also exist in `target`; all other weights
/// are freshly initialized from `seed`. The backbones must match.
pub fn transfer(source: &Checkpoint, target: &ModelSpec, seed: u64) -> Result<Checkpoint> {
    if source.spec.backbone != target.backbone {
        bail!(Config, "cannot transfer weights between different backbones");
    }
    let params = target.params()?;
    let mut rng = rng::seeded(seed, stream::HEAD);
    let mut weights = draw(&params, &mut rng)?;
    for (name, t) in weights.iter_mut() {
        if is_head_param(name) {
            continue;
        }
        if let Some(src) = source.weights.get(name) {
            if src.shape() == t.shape() {
                *t = src.clone();
            }
        }
    }
    let phase = match source.phase {
        Phase::Random => Phase::Random,
        Phase::Pretrained | Phase::Finetuned => Phase::Pretrained,
    };
    Checkpoint::new(target.clone(), weights, seed, phase)
}

/// Swaps the prediction head: body weights are copied verbatim and the head
/// is re-initialized for `new_head`.
pub fn transplant(ckpt: &Checkpoint, new_head: HeadKind, seed: u64) -> Result<Checkpoint> {
    let mut spec = ckpt.spec.clone();
    spec.head_kind = new_head;
    transfer(ckpt, &spec, seed)
}

/// Model parameters bound to one graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub vars: BTreeMap<String, Var>,
    backbone: BackboneVars,
    encoder: Vec<EncoderLayerVars>,
    decoder: Vec<DecoderLayerVars>,
    irq: Option<Var>,
    head: [Var; 4],
}

impl BoundModel {
    /// Attaches every weight to `g`, as gradient-enabled leaves when
    /// `trainable`.
    pub fn bind(g: &mut Graph, ckpt: &Checkpoint, trainable: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in &ckpt.weights {
            let v = if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
            vars.insert(name.clone(), v);
        }
        Self::from_vars(&ckpt.spec, vars)
    }

    /// Assembles the model from weights already on a graph, keyed by name.
    pub fn from_vars(spec: &ModelSpec, vars: BTreeMap<String, Var>) -> Result<Self> {
        let get = |name: &str| -> Result<Var> {
            match vars.get(name) {
                Some(v) => Ok(*v),
                None => bail!(Config, "checkpoint lacks weight {}", name),
            }
        };
        let mut stages = Vec::new();
        for (i, s) in spec.backbone.stages.iter().enumerate() {
            stages.push(ConvVars {
                kernel: get(&format!("backbone.stage{i}.kernel"))?,
                bias: get(&format!("backbone.stage{i}.bias"))?,
                stride: s.stride,
                padding: s.padding(),
            });
        }
        let projection =
            ConvVars { kernel: get("backbone.proj.kernel")?, bias: get("backbone.proj.bias")?, stride: 1, padding: 0 };
        let mha = |prefix: &str| -> Result<MultiHeadVars> {
            let heads = (0..spec.heads)
                .map(|h| {
                    Ok(HeadVars {
                        wq: get(&format!("{prefix}.head{h}.wq"))?,
                        wk: get(&format!("{prefix}.head{h}.wk"))?,
                        wv: get(&format!("{prefix}.head{h}.wv"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MultiHeadVars { heads, wo: get(&format!("{prefix}.wo"))? })
        };
        let ffn = |p: &str| -> Result<FfnVars> {
            Ok(FfnVars {
                w1: get(&format!("{p}.ffn.w1"))?,
                b1: get(&format!("{p}.ffn.b1"))?,
                w2: get(&format!("{p}.ffn.w2"))?,
                b2: get(&format!("{p}.ffn.b2"))?,
            })
        };
        let norm = |p: &str, k: usize| -> Result<NormVars> {
            Ok(NormVars { gain: get(&format!("{p}.norm{k}.gain"))?, bias: get(&format!("{p}.norm{k}.bias"))? })
        };
        let (mut encoder, mut decoder, mut irq) = (Vec::new(), Vec::new(), None);
        if spec.is_hybrid() {
            for l in 0..spec.encoder_layers {
                let p = format!("encoder.{l}");
                encoder.push(EncoderLayerVars {
                    self_attention: mha(&format!("{p}.self"))?,
                    ffn: ffn(&p)?,
                    norm1: norm(&p, 1)?,
                    norm2: norm(&p, 2)?,
                });
            }
            for l in 0..spec.decoder_layers {
                let p = format!("decoder.{l}");
                decoder.push(DecoderLayerVars {
                    self_attention: mha(&format!("{p}.self"))?,
                    cross_attention: mha(&format!("{p}.cross"))?,
                    ffn: ffn(&p)?,
                    norm1: norm(&p, 1)?,
                    norm2: norm(&p, 2)?,
                    norm3: norm(&p, 3)?,
                });
            }
            irq = Some(get("irq")?);
        }
        let head = [get("head.w1")?, get("head.b1")?, get("head.w2")?, get("head.b2")?];
        Ok(Self { backbone: BackboneVars { stages, projection }, encoder, decoder, irq, head, vars })
    }
}

/// Forward pass on a graph. Returns a 1-D output of length 15 (sigmoid
/// probabilities) or 2 (linear severity scores).
pub fn forward_graph(
    g: &mut Graph,
    spec: &ModelSpec,
    model: &BoundModel,
    image: Var,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let entities = backbone::backbone_forward(g, image, &spec.backbone, &model.backbone)?;
    let pooled = if let Some(irq) = model.irq {
        let n = g.value(entities).rows();
        let pe = attention::positional_encoding(n, spec.d)?;
        let mech = spec.mechanism();
        let memory = attention::encoder_forward(g, entities, &model.encoder, &pe, mech, dropout)?;
        let queries = attention::decoder_forward(g, irq, memory, &model.decoder, mech, dropout)?;
        g.mean(queries, 0)?
    } else {
        g.mean(entities, 0)?
    };
    let width = g.value(pooled).len();
    let x = g.reshape(pooled, &[1, width])?;
    let [w1, b1, w2, b2] = model.head;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w2)?;
    let o = g.add_bias(o, b2)?;
    let o = g.reshape(o, &[spec.head_kind.output_dim()])?;
    match spec.head_kind {
        HeadKind::Pretrain15 => g.sigmoid(o),
        HeadKind::Severity2 => Ok(o),
    }
}

/// Graph-free forward pass. Dropout is active only when `train_mode` is set.
pub fn forward(ckpt: &Checkpoint, image: &Tensor, rng: &mut dyn RngCore, train_mode: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let model = BoundModel::bind(&mut g, ckpt, false)?;
    let x = g.constant(image.clone());
    let mut dropout = if train_mode { Dropout::new(ckpt.spec.dropout, rng) } else { Dropout::off() };
    let out = forward_graph(&mut g, &ckpt.spec, &model, x, &mut dropout)?;
    Ok(g.value(out).clone())
}

/// Evaluation-mode prediction.
pub fn predict(ckpt: &Checkpoint, image: &Tensor) -> Result<Tensor> {
    let mut unused = rng::seeded(0, 0);
    forward(ckpt, image, &mut unused, false)
}

/// Entities produced by the backbone alone.
pub fn backbone_entities(ckpt: &Checkpoint, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let model = BoundModel::bind(&mut g, ckpt, false)?;
    let x = g.constant(image.clone());
    let e = backbone::backbone_forward(&mut g, x, &ckpt.spec.backbone, &model.backbone)?;
    Ok(g.value(e).clone())
}
