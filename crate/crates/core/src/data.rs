//! Datasets and the seeded synthetic generators.
//!
//! Both generators draw images from one family: a noisy background with zero
//! to three elliptical opacity blobs. Proxy samples carry 15 binary labels
//! that are threshold predicates of blob attributes; target samples carry two
//! severity scores derived from blob coverage and intensity. Every label is a
//! deterministic function of what is drawn, so it is learnable from pixels.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::{self, stream, ChaCha8Rng};
use crate::tensor::Tensor;
use crate::training::loss::{check_binary, N_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Proxy,
    Target,
}

impl DatasetKind {
    pub fn label_arity(self) -> usize {
        match self {
            DatasetKind::Proxy => N_CLASSES,
            DatasetKind::Target => 2,
        }
    }

    pub fn id_prefix(self) -> &'static str {
        match self {
            DatasetKind::Proxy => "proxy-",
            DatasetKind::Target => "target-",
        }
    }
}

/// Names of the two severity attributes, in label order.
pub const ATTRIBUTES: [&str; 2] = ["geographic_extend", "opacity"];

/// Default declared score ranges for the two attributes.
pub const DEFAULT_RANGES: [(f64, f64); 2] = [(0.0, 8.0), (0.0, 6.0)];

/// Default cohort size of the severity set.
pub const DEFAULT_TARGET_N: usize = 94;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self { channels: 1, height: 32, width: 32 }
    }
}

impl ImageGeometry {
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub patient_id: String,
    pub image: Tensor,
    pub labels: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    kind: DatasetKind,
    samples: Vec<Sample>,
    score_ranges: Option<[(f64, f64); 2]>,
}

impl Dataset {
    /// Validates ids, image geometry and labels. `score_ranges` must be given
    /// for target sets and absent for proxy sets.
    pub fn new(kind: DatasetKind, samples: Vec<Sample>, score_ranges: Option<[(f64, f64); 2]>) -> Result<Self> {
        if samples.is_empty() {
            bail!(Data, "no samples");
        }
        match (kind, &score_ranges) {
            (DatasetKind::Proxy, Some(_)) => bail!(Data, "proxy datasets carry no score ranges"),
            (DatasetKind::Target, None) => bail!(Data, "target datasets need score ranges"),
            (DatasetKind::Target, Some(r)) => {
                for (name, (lo, hi)) in ATTRIBUTES.iter().zip(r) {
                    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                        bail!(Data, "invalid score range [{}, {}] for {}", lo, hi, name);
                    }
                }
            }
            _ => {}
        }
        let shape = samples[0].image.shape().to_vec();
        if shape.len() != 3 {
            bail!(Data, "images must be c×h×w, got {:?}", shape);
        }
        let mut ids = BTreeSet::new();
        for (i, s) in samples.iter().enumerate() {
            let at = |msg: String| -> crate::Error { crate::Error::Data(format!("sample {} ({}): {}", i, s.sample_id, msg)) };
            if !ids.insert(s.sample_id.as_str()) {
                return Err(at("duplicate sample_id".into()));
            }
            if s.image.shape() != shape.as_slice() {
                return Err(at(format!("image shape {:?} differs from {:?}", s.image.shape(), shape)));
            }
            if !s.image.all_finite() {
                return Err(at("image has non-finite pixels".into()));
            }
            validate_labels(kind, score_ranges.as_ref(), &s.labels).map_err(|e| at(format!("{e}")))?;
        }
        Ok(Self { kind, samples, score_ranges })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn score_ranges(&self) -> Option<[(f64, f64); 2]> {
        self.score_ranges
    }

    pub fn image_shape(&self) -> &[usize] {
        self.samples[0].image.shape()
    }

    /// Subset with the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(self.kind, samples, self.score_ranges)
    }
}

/// Checks a label vector against the dataset kind and declared ranges.
pub fn validate_labels(kind: DatasetKind, ranges: Option<&[(f64, f64); 2]>, labels: &Tensor) -> Result<()> {
    if labels.shape() != [kind.label_arity()] {
        bail!(Data, "expected {} labels, got shape {:?}", kind.label_arity(), labels.shape());
    }
    match kind {
        DatasetKind::Proxy => check_binary(labels),
        DatasetKind::Target => {
            let ranges = ranges.copied().unwrap_or(DEFAULT_RANGES);
            for ((v, (lo, hi)), name) in labels.data().iter().zip(ranges).zip(ATTRIBUTES) {
                if !(lo..=hi).contains(v) {
                    bail!(Data, "{} score {} outside [{}, {}]", name, v, lo, hi);
                }
            }
            Ok(())
        }
    }
}

/// Generator parameters, echoed next to each generated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub kind: DatasetKind,
    pub seed: u64,
    pub n_samples: usize,
    #[serde(default)]
    pub geometry: ImageGeometry,
    /// Label noise standard deviation as a fraction of each score range
    /// (target only).
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_ranges: Option<[(f64, f64); 2]>,
}

impl SynthParams {
    pub fn generate(&self) -> Result<Dataset> {
        match self.kind {
            DatasetKind::Proxy => synth_proxy(self.seed, self.n_samples, self.geometry),
            DatasetKind::Target => {
                synth_target_with(self.seed, self.n_samples, self.geometry, self.noise_sd, self.score_ranges.unwrap_or(DEFAULT_RANGES))
            }
        }
    }
}

/// Background pixel noise standard deviation.
const PIXEL_NOISE: f64 = 0.05;
/// Blob coverage at which the extent score saturates at the range maximum.
const FULL_COVERAGE: f64 = 0.4;

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    /// Semi-axes as fractions of the image side.
    a: f64,
    b: f64,
    theta: f64,
    intensity: f64,
}

impl Blob {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            cx: rng.gen_range(0.2..0.8),
            cy: rng.gen_range(0.2..0.8),
            a: rng.gen_range(0.08..0.24),
            b: rng.gen_range(0.08..0.24),
            theta: rng.gen_range(0.0..core::f64::consts::PI),
            intensity: rng.gen_range(0.2..1.0),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = (crate::math::sin(self.theta), crate::math::cos(self.theta));
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    fn area(&self) -> f64 {
        core::f64::consts::PI * self.a * self.b
    }

    fn aspect(&self) -> f64 {
        self.a.max(self.b) / self.a.min(self.b)
    }
}

/// One rendered scene and the attributes labels are derived from.
struct Scene {
    image: Tensor,
    blobs: Vec<Blob>,
    /// Fraction of pixels inside at least one blob.
    coverage: f64,
}

fn render(rng: &mut ChaCha8Rng, geo: ImageGeometry) -> Scene {
    let count = rng.gen_range(0..=3usize);
    let blobs: Vec<Blob> = (0..count).map(|_| Blob::draw(rng)).collect();
    let (h, w) = (geo.height, geo.width);
    let mut base = vec![0.0; h * w];
    let mut covered = 0usize;
    for yi in 0..h {
        for xi in 0..w {
            let (x, y) = ((xi as f64 + 0.5) / w as f64, (yi as f64 + 0.5) / h as f64);
            let v = blobs.iter().filter(|b| b.contains(x, y)).map(|b| b.intensity).fold(0.0, f64::max);
            if v > 0.0 {
                covered += 1;
            }
            base[yi * w + xi] = v;
        }
    }
    let mut data = Vec::with_capacity(geo.channels * h * w);
    for _ in 0..geo.channels {
        data.extend(base.iter().map(|v| v + rng::normal(rng, 0.0, PIXEL_NOISE)));
    }
    let image = Tensor::new(geo.shape().to_vec(), data).expect("geometry is positive");
    Scene { image, blobs, coverage: covered as f64 / (h * w) as f64 }
}

fn proxy_labels(scene: &Scene) -> [bool; N_CLASSES] {
    let b = &scene.blobs;
    let n = b.len();
    let max_i = b.iter().map(|b| b.intensity).fold(0.0, f64::max);
    let quadrant = |q: usize| b.iter().any(|b| ((b.cx >= 0.5) as usize) + 2 * ((b.cy >= 0.5) as usize) == q);
    let left = b.iter().any(|b| b.cx < 0.5);
    let right = b.iter().any(|b| b.cx >= 0.5);
    [
        n >= 1,
        n >= 2,
        n >= 3,
        scene.coverage > 0.06,
        scene.coverage > 0.15,
        max_i > 0.6,
        max_i > 0.85,
        quadrant(0),
        quadrant(1),
        quadrant(2),
        quadrant(3),
        b.iter().any(|b| b.area() > 0.09),
        b.iter().any(|b| b.area() < 0.04),
        b.iter().any(|b| b.aspect() > 1.8),
        left && right,
    ]
}

/// Proxy set for pre-training: 15 binary labels per image, one synthetic
/// patient per 1 to 3 consecutive samples.
pub fn synth_proxy(seed: u64, n_samples: usize, geometry: ImageGeometry) -> Result<Dataset> {
    check_params(n_samples, geometry)?;
    let mut rng = rng::seeded(seed, stream::DATA);
    let mut samples = Vec::with_capacity(n_samples);
    let mut patient = 0usize;
    while samples.len() < n_samples {
        let group = rng.gen_range(1..=3usize).min(n_samples - samples.len());
        for _ in 0..group {
            let scene = render(&mut rng, geometry);
            let labels = Tensor::vector(proxy_labels(&scene).iter().map(|&b| b as u8 as f64).collect());
            samples.push(Sample {
                sample_id: format!("proxy-{seed}-{:05}", samples.len()),
                patient_id: format!("proxy-{seed}-p{patient:05}"),
                image: scene.image,
                labels,
            });
        }
        patient += 1;
    }
    Dataset::new(DatasetKind::Proxy, samples, None)
}

/// Severity scores for a scene, before label noise.
fn severity(scene: &Scene, ranges: [(f64, f64); 2]) -> [f64; 2] {
    let extent = (scene.coverage / FULL_COVERAGE).min(1.0);
    let opacity = if scene.blobs.is_empty() {
        0.0
    } else {
        scene.blobs.iter().map(|b| b.intensity).sum::<f64>() / scene.blobs.len() as f64
    };
    let [(l0, h0), (l1, h1)] = ranges;
    [l0 + (h0 - l0) * extent, l1 + (h1 - l1) * opacity]
}

/// Severity set with the default score ranges: one patient per sample.
pub fn synth_target(seed: u64, n_samples: usize, geometry: ImageGeometry, noise_sd: f64) -> Result<Dataset> {
    synth_target_with(seed, n_samples, geometry, noise_sd, DEFAULT_RANGES)
}

/// Severity set with explicit score ranges. Label noise is additive Gaussian
/// with standard deviation `noise_sd · (hi − lo)`, clamped back into range.
pub fn synth_target_with(
    seed: u64,
    n_samples: usize,
    geometry: ImageGeometry,
    noise_sd: f64,
    ranges: [(f64, f64); 2],
) -> Result<Dataset> {
    check_params(n_samples, geometry)?;
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        bail!(Parameter, "noise_sd must be non-negative, got {}", noise_sd);
    }
    let mut rng = rng::seeded(seed, stream::DATA);
    let mut noise_rng = rng::seeded(seed, stream::DATA + 100);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let scene = render(&mut rng, geometry);
        let clean = severity(&scene, ranges);
        let mut labels = [0.0; 2];
        for (k, ((lo, hi), v)) in ranges.iter().zip(clean).enumerate() {
            let noisy = if noise_sd > 0.0 { v + rng::normal(&mut noise_rng, 0.0, noise_sd * (hi - lo)) } else { v };
            labels[k] = noisy.clamp(*lo, *hi);
        }
        samples.push(Sample {
            sample_id: format!("target-{seed}-{i:05}"),
            patient_id: format!("target-{seed}-p{i:05}"),
            image: scene.image,
            labels: Tensor::vector(labels.to_vec()),
        });
    }
    Dataset::new(DatasetKind::Target, samples, Some(ranges))
}

fn check_params(n_samples: usize, geometry: ImageGeometry) -> Result<()> {
    if n_samples == 0 {
        bail!(Parameter, "n_samples must be at least 1");
    }
    if geometry.channels == 0 || geometry.height == 0 || geometry.width == 0 {
        bail!(Parameter, "image geometry must be positive, got {:?}", geometry);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn first_empty_scene(seed: u64) -> Scene {
        let mut rng = rng::seeded(seed, stream::DATA);
        loop {
            let s = render(&mut rng, ImageGeometry::default());
            if s.blobs.is_empty() {
                return s;
            }
        }
    }

    #[test]
    fn empty_scene_is_normal_and_minimal() {
        let s = first_empty_scene(3);
        assert!(proxy_labels(&s).iter().all(|&b| !b));
        assert_eq!(severity(&s, DEFAULT_RANGES), [0.0, 0.0]);
        assert_eq!(s.coverage, 0.0);
    }

    #[test]
    fn generators_are_pure() {
        let g = ImageGeometry { channels: 2, height: 12, width: 10 };
        assert_eq!(synth_proxy(5, 20, g).unwrap(), synth_proxy(5, 20, g).unwrap());
        assert_ne!(synth_proxy(5, 20, g).unwrap(), synth_proxy(6, 20, g).unwrap());
        let a = synth_target(5, 20, g, 0.05).unwrap();
        assert_eq!(a, synth_target(5, 20, g, 0.05).unwrap());
        assert_eq!(a.image_shape(), &[2, 12, 10]);
    }

    #[test]
    fn noiseless_scores_depend_only_on_the_scene() {
        let d = synth_target(9, 30, ImageGeometry::default(), 0.0).unwrap();
        let mut rng = rng::seeded(9, stream::DATA);
        for s in d.samples() {
            let scene = render(&mut rng, ImageGeometry::default());
            assert_eq!(s.labels.data(), severity(&scene, DEFAULT_RANGES));
            assert_eq!(s.image, scene.image);
        }
    }

    #[test]
    fn proxy_prevalence_is_calibrated() {
        let d = synth_proxy(11, 600, ImageGeometry::default()).unwrap();
        for c in 0..N_CLASSES {
            let p = d.samples().iter().map(|s| s.labels.data()[c]).sum::<f64>() / d.len() as f64;
            assert!((0.1..=0.9).contains(&p), "class {c} prevalence {p}");
        }
    }

    #[test]
    fn target_scores_span_the_range() {
        let d = synth_target(1, DEFAULT_TARGET_N, ImageGeometry::default(), 0.0).unwrap();
        for (k, (lo, hi)) in DEFAULT_RANGES.iter().enumerate() {
            let vals: Vec<f64> = d.samples().iter().map(|s| s.labels.data()[k]).collect();
            let span = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
            assert!(span >= 0.6 * (hi - lo), "attribute {k} spans {span}");
        }
    }

    #[test]
    fn proxy_patients_group_up_to_three_samples() {
        let d = synth_proxy(2, 100, ImageGeometry::default()).unwrap();
        let mut counts = alloc::collections::BTreeMap::new();
        for s in d.samples() {
            assert!(s.sample_id.starts_with("proxy-"));
            *counts.entry(s.patient_id.clone()).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&c| (1..=3).contains(&c)));
        assert!(counts.len() < 100);
    }

    #[test]
    fn validation_errors() {
        let g = ImageGeometry { channels: 1, height: 4, width: 4 };
        assert!(synth_proxy(0, 0, g).is_err());
        let d = synth_target(0, 3, g, 0.0).unwrap();
        let mut s = d.samples().to_vec();
        s[2].sample_id = s[0].sample_id.clone();
        assert!(matches!(Dataset::new(DatasetKind::Target, s, Some(DEFAULT_RANGES)), Err(crate::Error::Data(_))));
        let mut s = d.samples().to_vec();
        s[1].labels = Tensor::vector(vec![9.0, 1.0]);
        assert!(Dataset::new(DatasetKind::Target, s, Some(DEFAULT_RANGES)).is_err());
        assert!(Dataset::new(DatasetKind::Proxy, Vec::new(), None).is_err());
    }
}
