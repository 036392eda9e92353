//! Finite-difference verification of every differentiable primitive and of
//! whole models.

use alloc::collections::BTreeMap;
use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::Dropout;
use crate::autodiff::{grad_check_multi, GradCheckOptions, Graph, Var};
use crate::error::Result;
use crate::model::{self, BoundModel, HeadKind, ModelSpec};
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::Tensor;

/// Worst relative error of one checked operation.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

/// Accepted relative error of a gradient check.
pub const TOLERANCE: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive shape")
}

/// Values bounded away from zero, for kinked primitives.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    t
}

type Op = alloc::boxed::Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// `Σ y ⊙ probe`, the last input being the probe.
fn probe(g: &mut Graph, y: Var, p: Var) -> Result<Var> {
    let m = g.mul(y, p)?;
    g.sum(m)
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Op, Vec<Tensor>)> {
    let mut u = |shape: &[usize]| uniform(rng, shape, -1.0, 1.0);
    let (a, b, c, d, e) = (u(&[3, 4]), u(&[4, 2]), u(&[3, 4]), u(&[3, 2]), u(&[3, 4]));
    let (bias, p34, p43) = (u(&[4]), u(&[3, 4]), u(&[4, 3]));
    let (lg, lb) = (u(&[4]).map(|v| v + 1.5), u(&[4]));
    let (img, ker, cb, pconv) = (u(&[2, 5, 5]), u(&[3, 2, 3, 3]), u(&[3]), u(&[3, 3, 3]));
    let (pcat, p4, p12, target) = (u(&[3, 8]), u(&[4]), u(&[12]), u(&[3, 4]));
    let relu_in = away_from_zero(rng, &[3, 4]);
    let probs = uniform(rng, &[15], 0.1, 0.9);
    let labels = Tensor::vector((0..15).map(|i| (i % 3 == 0) as u8 as f64).collect());
    vec![
        ("matmul", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.matmul(v[0], v[1])?; probe(g, y, v[2]) }), vec![a.clone(), b, d]),
        ("add", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.add(v[0], v[1])?; probe(g, y, v[2]) }), vec![a.clone(), c.clone(), p34.clone()]),
        ("sub", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.sub(v[0], v[1])?; probe(g, y, v[2]) }), vec![a.clone(), c.clone(), p34.clone()]),
        ("mul", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.mul(v[0], v[1])?; probe(g, y, v[2]) }), vec![a.clone(), c, p34.clone()]),
        ("add_bias", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.add_bias(v[0], v[1])?; probe(g, y, v[2]) }), vec![a.clone(), bias, p34.clone()]),
        ("scale", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.scale(v[0], -1.7)?; probe(g, y, v[1]) }), vec![a.clone(), p34.clone()]),
        ("relu", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.relu(v[0])?; probe(g, y, v[1]) }), vec![relu_in, p34.clone()]),
        ("sigmoid", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.sigmoid(v[0])?; probe(g, y, v[1]) }), vec![a.clone(), p34.clone()]),
        ("softmax", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.softmax(v[0], 0.8)?; probe(g, y, v[1]) }), vec![a.clone(), p34.clone()]),
        ("lse", Box::new(|g: &mut Graph, v: &[Var]| { let f = g.reshape(v[0], &[12])?; g.lse(f, 2.0) }), vec![e.clone()]),
        ("layer_norm", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.layer_norm(v[0], v[1], v[2], crate::attention::LAYER_NORM_EPS)?; probe(g, y, v[3]) }), vec![e.clone(), lg, lb, p34.clone()]),
        ("concat", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.concat(&[v[0], v[1]], 1)?; probe(g, y, v[2]) }), vec![a.clone(), e.clone(), pcat]),
        ("transpose", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.transpose(v[0])?; probe(g, y, v[1]) }), vec![a.clone(), p43]),
        ("mean", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.mean(v[0], 0)?; probe(g, y, v[1]) }), vec![a.clone(), p4]),
        ("sum", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.sum(v[0])?; g.mul(y, y) }), vec![a.clone()]),
        ("reshape", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.reshape(v[0], &[12])?; probe(g, y, v[1]) }), vec![e, p12]),
        ("conv2d", Box::new(|g: &mut Graph, v: &[Var]| { let y = g.conv2d(v[0], v[1], v[2], 2, 1)?; probe(g, y, v[3]) }), vec![img, ker, cb, pconv]),
        ("smooth_l1", Box::new(move |g: &mut Graph, v: &[Var]| g.smooth_l1(v[0], &target, 0.5)), vec![a]),
        ("bce_multilabel", Box::new(move |g: &mut Graph, v: &[Var]| g.bce_multilabel(v[0], &labels)), vec![probs]),
    ]
}

/// Checks every primitive on seeded random inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = rng::seeded(seed, 0);
    let opts = GradCheckOptions { step: 1e-6, max_coords_per_input: None, seed };
    cases(&mut rng)
        .into_iter()
        .map(|(name, op, inputs)| {
            let r = grad_check_multi(|g, v| op(g, v), &inputs, opts)?;
            Ok(CheckResult { name: name.into(), max_rel_error: r.max_rel_error, coords: r.coords_checked })
        })
        .collect()
}

/// Checks the smooth-L1 training loss of a full model with respect to every
/// weight tensor and the input image. Dropout is disabled. At most
/// `max_coords` seeded coordinates are perturbed per tensor.
///
/// The check point is a fresh initialization with the query rows redrawn
/// from a standard normal. At their initial scale the queries make the
/// decoder self-attention gradients smaller than the finite-difference
/// round-off, which would measure noise rather than the backward pass.
pub fn model_check(spec: &ModelSpec, seed: u64, max_coords: Option<usize>) -> Result<CheckResult> {
    let mut spec = spec.clone();
    spec.dropout = 0.0;
    spec.head_kind = HeadKind::Severity2;
    let ckpt = model::init(&spec, seed)?;
    let mut rng = rng::seeded(seed, 7);
    let b = &spec.backbone;
    let image = uniform(&mut rng, &[b.in_channels, b.height, b.width], 0.0, 1.0);
    let target = uniform(&mut rng, &[2], -1.0, 1.0);
    let names: Vec<String> = ckpt.weights().keys().cloned().collect();
    let mut inputs: Vec<Tensor> = ckpt.weights().values().cloned().collect();
    if let Some(i) = names.iter().position(|n| n == "irq") {
        inputs[i].data_mut().iter_mut().for_each(|v| *v = rng::standard_normal(&mut rng));
    }
    inputs.push(image);
    let f = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let map: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
        let bound = BoundModel::from_vars(&spec, map)?;
        let y = model::forward_graph(g, &spec, &bound, vars[names.len()], &mut Dropout::off())?;
        g.smooth_l1(y, &target, 1.0)
    };
    let opts = GradCheckOptions { step: 1e-5, max_coords_per_input: max_coords, seed };
    let r = grad_check_multi(f, &inputs, opts)?;
    let kind = match spec.attention_kind {
        model::AttentionKind::None => "cnn",
        model::AttentionKind::Transformer => "hct",
        model::AttentionKind::Hopfield => "hch",
    };
    Ok(CheckResult { name: alloc::format!("model.{kind}"), max_rel_error: r.max_rel_error, coords: r.coords_checked })
}
