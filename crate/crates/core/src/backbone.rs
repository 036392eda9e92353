//! Small convolutional backbone and the feature-map → entity transform.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::tensor::{conv_out_extent, Tensor};

/// Convolution parameters as graph handles.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

/// Owned convolution layer: `kernel[c_out×c_in×k×k]`, `bias[c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if kernel.ndim() != 4 || kernel.shape()[2] != kernel.shape()[3] {
            bail!(Dimension, "kernel must be c_out×c_in×k×k, got {:?}", kernel.shape());
        }
        if bias.len() != kernel.shape()[0] {
            bail!(Dimension, "bias length {} != c_out {}", bias.len(), kernel.shape()[0]);
        }
        if stride == 0 {
            bail!(Dimension, "stride must be positive");
        }
        Ok(Self { kernel, bias, stride, padding })
    }

    pub fn attach(&self, g: &mut Graph, trainable: bool) -> ConvVars {
        let (kernel, bias) = if trainable {
            (g.leaf(self.kernel.clone()), g.leaf(self.bias.clone()))
        } else {
            (g.constant(self.kernel.clone()), g.constant(self.bias.clone()))
        };
        ConvVars { kernel, bias, stride: self.stride, padding: self.padding }
    }
}

pub fn conv2d(g: &mut Graph, input: Var, layer: &ConvVars) -> Result<Var> {
    g.conv2d(input, layer.kernel, layer.bias, layer.stride, layer.padding)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Defaults to `kernel / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
}

impl StageSpec {
    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stages: Vec<StageSpec>,
    /// Entity dimension after the 1×1 projection.
    pub projection: usize,
    /// Apply relu after each stage.
    #[serde(default = "default_true")]
    pub activation: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BackboneSpec {
    /// 1×32×32 input, stages of 8/16/32 channels with 3×3 stride-2 kernels,
    /// projected to 64 → 16 entities.
    fn default() -> Self {
        let stage = |channels| StageSpec { channels, kernel: 3, stride: 2, padding: None };
        Self {
            in_channels: 1,
            height: 32,
            width: 32,
            stages: alloc::vec![stage(8), stage(16), stage(32)],
            projection: 64,
            activation: true,
        }
    }
}

impl BackboneSpec {
    /// Validates the geometry and returns `(C, H, W)` of the final feature map
    /// before projection.
    pub fn feature_geometry(&self) -> Result<(usize, usize, usize)> {
        if self.in_channels == 0 || self.height == 0 || self.width == 0 || self.projection == 0 {
            bail!(Config, "backbone extents must be positive");
        }
        let (mut c, mut h, mut w) = (self.in_channels, self.height, self.width);
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.kernel == 0 || s.stride == 0 {
                bail!(Config, "stage {} has a zero channel count, kernel or stride", i);
            }
            let (Some(nh), Some(nw)) =
                (conv_out_extent(h, s.kernel, s.stride, s.padding()), conv_out_extent(w, s.kernel, s.stride, s.padding()))
            else {
                bail!(Config, "stage {} does not fit a {}x{} input", i, h, w);
            };
            (c, h, w) = (s.channels, nh, nw);
        }
        Ok((c, h, w))
    }

    /// Number of entities `H·W` after the last stage.
    pub fn entity_count(&self) -> Result<usize> {
        self.feature_geometry().map(|(_, h, w)| h * w)
    }

    /// Parameter names and shapes, in forward order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let (c_last, _, _) = self.feature_geometry()?;
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("backbone.stage{i}.kernel"), alloc::vec![s.channels, c_in, s.kernel, s.kernel]));
            out.push((format!("backbone.stage{i}.bias"), alloc::vec![s.channels]));
            c_in = s.channels;
        }
        out.push(("backbone.proj.kernel".into(), alloc::vec![self.projection, c_last, 1, 1]));
        out.push(("backbone.proj.bias".into(), alloc::vec![self.projection]));
        Ok(out)
    }
}

/// Backbone parameters bound to a graph.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub stages: Vec<ConvVars>,
    pub projection: ConvVars,
}

/// Applies the 1×1 projection to `fm[C×H×W]` and flattens the spatial
/// positions row-major into an `(H·W) × p` entity matrix.
pub fn vectorize_entities(g: &mut Graph, fm: Var, projection: &ConvVars) -> Result<Var> {
    let ks = g.value(projection.kernel).shape();
    if ks.len() != 4 || ks[2] != 1 || ks[3] != 1 {
        bail!(Dimension, "entity projection must be a 1×1 convolution, got kernel {:?}", ks);
    }
    let projected = conv2d(g, fm, projection)?;
    let s = g.value(projected).shape().to_vec();
    let flat = g.reshape(projected, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

pub fn backbone_forward(g: &mut Graph, image: Var, spec: &BackboneSpec, weights: &BackboneVars) -> Result<Var> {
    let shape = g.value(image).shape();
    if shape != [spec.in_channels, spec.height, spec.width] {
        bail!(
            Dimension,
            "image shape {:?} does not match backbone input {}x{}x{}",
            shape,
            spec.in_channels,
            spec.height,
            spec.width
        );
    }
    if weights.stages.len() != spec.stages.len() {
        bail!(Dimension, "{} stage weights for {} stages", weights.stages.len(), spec.stages.len());
    }
    let mut x = image;
    for stage in &weights.stages {
        x = conv2d(g, x, stage)?;
        if spec.activation {
            x = g.relu(x)?;
        }
    }
    vectorize_entities(g, x, &weights.projection)
}
