use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_out_extent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layer {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    BatchNorm,
    Relu,
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<Layer>,
        #[serde(default)]
        shortcut: Vec<Layer>,
    },
    GlobalAvgPool,
    Dense {
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl Layer {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Layer::Conv2d { out_channels, kernel, stride, pad, bias: true }
    }

    pub fn conv_nobias(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Layer::Conv2d { out_channels, kernel, stride, pad, bias: false }
    }

    pub fn dense(out_features: usize) -> Self {
        Layer::Dense { out_features, bias: true }
    }
}

/// Declarative CNN description.
///
/// The tensor entering the single [`Layer::GlobalAvgPool`] is the
/// `final_conv` tap; the pooled vector is the `avg_pool` tap. Only dense
/// layers and ReLUs may follow the pool, and the last layer must be a dense
/// layer producing `classes` logits. A headless trunk has `classes == 0` and
/// ends at the pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: InputShape,
    pub classes: usize,
    pub layers: Vec<Layer>,
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat(f) => f,
        }
    }
}

/// Per-layer accounting in execution order (residual branches flattened,
/// body before shortcut).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub kind: LayerKind,
    pub params: usize,
    /// Parameter tensors (weight, bias, gamma, beta) behind `params`.
    pub tensors: usize,
    pub flops: u64,
    pub output: Shape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Relu,
    GlobalAvgPool,
    Dense,
    ResidualAdd,
}

impl ModelSpec {
    /// Check structural rules and return the per-layer accounting.
    pub fn layer_summary(&self) -> Result<Vec<LayerInfo>> {
        self.layer_summary_at(self.input)
    }

    /// Same as [`Self::layer_summary`] but with a different input extent.
    pub fn layer_summary_at(&self, input: InputShape) -> Result<Vec<LayerInfo>> {
        if input.channels == 0 || input.height == 0 || input.width == 0 {
            return Err(Error::InvalidSpec(format!("empty input {input:?}")));
        }
        let pools = self.layers.iter().filter(|l| matches!(l, Layer::GlobalAvgPool)).count();
        if pools != 1 {
            return Err(Error::InvalidSpec(format!("expected exactly one global_avg_pool at top level, found {pools}")));
        }
        let mut out = Vec::new();
        let mut shape = Shape::Map { c: input.channels, h: input.height, w: input.width };
        let mut saw_conv = false;
        for layer in &self.layers {
            if let Layer::GlobalAvgPool = layer {
                if !saw_conv {
                    return Err(Error::InvalidSpec("no convolution before global_avg_pool".into()));
                }
            }
            if matches!(layer, Layer::Conv2d { .. } | Layer::Residual { .. }) {
                saw_conv = true;
            }
            shape = walk(layer, shape, &mut out)?;
        }
        match self.layers.last() {
            Some(Layer::Dense { out_features, .. }) if *out_features == self.classes => Ok(out),
            Some(Layer::GlobalAvgPool) if self.classes == 0 => Ok(out),
            _ if self.classes == 0 => Err(Error::InvalidSpec("a headless trunk must end at global_avg_pool".into())),
            _ => Err(Error::InvalidSpec(format!("last layer must be dense with {} outputs", self.classes))),
        }
    }

    pub fn is_headless(&self) -> bool {
        self.classes == 0
    }

    /// Same network with everything after the pool removed.
    pub fn trunk(&self) -> ModelSpec {
        let pool = self.layers.iter().position(|l| matches!(l, Layer::GlobalAvgPool)).map_or(self.layers.len(), |p| p + 1);
        ModelSpec { input: self.input, classes: 0, layers: self.layers[..pool].to_vec() }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_summary().map(|_| ())
    }

    /// Trainable scalars: weights, biases and batch-norm scale/shift.
    pub fn count_params(&self) -> Result<usize> {
        Ok(self.layer_summary()?.iter().map(|l| l.params).sum())
    }

    /// Two FLOPs per multiply-accumulate over conv and dense layers; biases,
    /// normalisation, activations and pooling are not counted.
    pub fn count_flops(&self) -> Result<u64> {
        self.count_flops_at(self.input)
    }

    pub fn count_flops_at(&self, input: InputShape) -> Result<u64> {
        Ok(self.layer_summary_at(input)?.iter().map(|l| l.flops).sum())
    }

    /// Channel count of the `final_conv` tap.
    pub fn final_channels(&self) -> Result<usize> {
        let summary = self.layer_summary()?;
        let pool = summary.iter().position(|l| l.kind == LayerKind::GlobalAvgPool).expect("validated");
        match summary[pool].output {
            Shape::Flat(c) => Ok(c),
            Shape::Map { .. } => unreachable!("pool output is flat"),
        }
    }

    /// Spatial extent `(h, w)` of the `final_conv` tap.
    pub fn final_extent(&self) -> Result<(usize, usize)> {
        let summary = self.layer_summary()?;
        let pool = summary.iter().position(|l| l.kind == LayerKind::GlobalAvgPool).expect("validated");
        match summary[..pool].iter().rev().map(|l| l.output).next() {
            Some(Shape::Map { h, w, .. }) => Ok((h, w)),
            _ => Err(Error::InvalidSpec("global_avg_pool input is not a feature map".into())),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn walk(layer: &Layer, shape: Shape, out: &mut Vec<LayerInfo>) -> Result<Shape> {
    let map = |what: &str| -> Result<(usize, usize, usize)> {
        match shape {
            Shape::Map { c, h, w } => Ok((c, h, w)),
            Shape::Flat(_) => Err(Error::InvalidSpec(format!("{what} after global_avg_pool"))),
        }
    };
    let next = match layer {
        Layer::Conv2d { out_channels, kernel, stride, pad, bias } => {
            let (c, h, w) = map("conv2d")?;
            if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                return Err(Error::InvalidSpec(format!("degenerate conv2d {layer:?}")));
            }
            let oh = conv_out_extent(h, *kernel, *stride, *pad)
                .ok_or_else(|| Error::InvalidSpec(format!("kernel {kernel} larger than padded input {h}×{w}")))?;
            let ow = conv_out_extent(w, *kernel, *stride, *pad)
                .ok_or_else(|| Error::InvalidSpec(format!("kernel {kernel} larger than padded input {h}×{w}")))?;
            let k = *out_channels;
            let macs = (k * c * kernel * kernel * oh * ow) as u64;
            let params = k * c * kernel * kernel + if *bias { k } else { 0 };
            let output = Shape::Map { c: k, h: oh, w: ow };
            out.push(LayerInfo { kind: LayerKind::Conv, params, tensors: 1 + usize::from(*bias), flops: 2 * macs, output });
            output
        }
        Layer::BatchNorm => {
            let (c, _, _) = map("batch_norm")?;
            out.push(LayerInfo { kind: LayerKind::BatchNorm, params: 2 * c, tensors: 2, flops: 0, output: shape });
            shape
        }
        Layer::Relu => {
            out.push(LayerInfo { kind: LayerKind::Relu, params: 0, tensors: 0, flops: 0, output: shape });
            shape
        }
        Layer::Residual { body, shortcut } => {
            map("residual")?;
            let mut b = shape;
            for l in body {
                b = walk(l, b, out)?;
            }
            let mut s = shape;
            for l in shortcut {
                s = walk(l, s, out)?;
            }
            if b != s {
                return Err(Error::InvalidSpec(format!("residual branches disagree: body {b:?} vs shortcut {s:?}")));
            }
            if matches!(b, Shape::Flat(_)) {
                return Err(Error::InvalidSpec("residual branch pools".into()));
            }
            out.push(LayerInfo { kind: LayerKind::ResidualAdd, params: 0, tensors: 0, flops: 0, output: b });
            b
        }
        Layer::GlobalAvgPool => {
            let (c, _, _) = map("global_avg_pool")?;
            let output = Shape::Flat(c);
            out.push(LayerInfo { kind: LayerKind::GlobalAvgPool, params: 0, tensors: 0, flops: 0, output });
            output
        }
        Layer::Dense { out_features, bias } => {
            let f = match shape {
                Shape::Flat(f) => f,
                Shape::Map { .. } => return Err(Error::InvalidSpec("dense before global_avg_pool".into())),
            };
            if *out_features == 0 {
                return Err(Error::InvalidSpec("dense with zero outputs".into()));
            }
            let g = *out_features;
            let params = f * g + if *bias { g } else { 0 };
            let output = Shape::Flat(g);
            out.push(LayerInfo { kind: LayerKind::Dense, params, tensors: 1 + usize::from(*bias), flops: 2 * (f * g) as u64, output });
            output
        }
    };
    Ok(next)
}

/// Wide-ResNet family member WRN-depth-k.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrnConfig {
    pub depth: usize,
    pub width: usize,
}

impl WrnConfig {
    pub fn new(depth: usize, width: usize) -> Result<Self> {
        if depth < 10 || (depth - 4) % 6 != 0 {
            return Err(Error::InvalidSpec(format!("WRN depth must be 6n+4 with n ≥ 1, got {depth}")));
        }
        if width == 0 {
            return Err(Error::InvalidSpec("WRN width must be positive".into()));
        }
        Ok(Self { depth, width })
    }

    pub fn blocks_per_group(&self) -> usize {
        (self.depth - 4) / 6
    }

    pub fn spec(&self, input: InputShape, classes: usize) -> ModelSpec {
        let k = self.width;
        wrn_spec(self.blocks_per_group(), [16 * k, 32 * k, 64 * k], 16, input, classes)
    }
}

/// Pre-activation wide residual network: a 3×3 stem with `stem` filters,
/// three groups of `blocks` basic blocks at strides 1, 2, 2, then
/// BN-ReLU-pool-dense. Blocks that change shape use a 1×1 projection
/// shortcut. Convolutions carry no bias.
pub fn wrn_spec(blocks: usize, widths: [usize; 3], stem: usize, input: InputShape, classes: usize) -> ModelSpec {
    let mut layers = vec![Layer::conv_nobias(stem, 3, 1, 1)];
    let mut channels = stem;
    for (g, &w) in widths.iter().enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 && g > 0 { 2 } else { 1 };
            let body = vec![
                Layer::BatchNorm,
                Layer::Relu,
                Layer::conv_nobias(w, 3, stride, 1),
                Layer::BatchNorm,
                Layer::Relu,
                Layer::conv_nobias(w, 3, 1, 1),
            ];
            let shortcut = if stride != 1 || channels != w { vec![Layer::conv_nobias(w, 1, stride, 0)] } else { vec![] };
            layers.push(Layer::Residual { body, shortcut });
            channels = w;
        }
    }
    layers.extend([Layer::BatchNorm, Layer::Relu, Layer::GlobalAvgPool, Layer::dense(classes)]);
    ModelSpec { input, classes, layers }
}

pub const CIFAR_INPUT: InputShape = InputShape::new(3, 32, 32);

/// Plain strided CNN: each `(filters, stride)` entry is a 3×3 conv + ReLU,
/// followed by global pooling and a dense classifier.
pub fn plain_cnn(input: InputShape, classes: usize, convs: &[(usize, usize)]) -> ModelSpec {
    let mut layers = Vec::new();
    for &(f, s) in convs {
        layers.push(Layer::conv(f, 3, s, 1));
        layers.push(Layer::Relu);
    }
    layers.extend([Layer::GlobalAvgPool, Layer::dense(classes)]);
    ModelSpec { input, classes, layers }
}

/// Like [`plain_cnn`] with batch normalisation between each conv and ReLU.
pub fn plain_cnn_bn(input: InputShape, classes: usize, convs: &[(usize, usize)]) -> ModelSpec {
    let mut layers = Vec::new();
    for &(f, s) in convs {
        layers.extend([Layer::conv_nobias(f, 3, s, 1), Layer::BatchNorm, Layer::Relu]);
    }
    layers.extend([Layer::GlobalAvgPool, Layer::dense(classes)]);
    ModelSpec { input, classes, layers }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_only_counts() {
        let spec = ModelSpec {
            input: InputShape::new(10, 1, 1),
            classes: 10,
            layers: vec![Layer::conv_nobias(10, 1, 1, 0), Layer::GlobalAvgPool, Layer::dense(10)],
        };
        let s = spec.layer_summary().unwrap();
        assert_eq!(s.last().unwrap().params, 110);
        assert_eq!(s.last().unwrap().flops, 200);
    }

    #[test]
    fn single_conv_flops() {
        let spec = ModelSpec {
            input: InputShape::new(1, 32, 32),
            classes: 1,
            layers: vec![Layer::conv(1, 3, 1, 1), Layer::GlobalAvgPool, Layer::dense(1)],
        };
        assert_eq!(spec.layer_summary().unwrap()[0].flops, 18432);
    }

    #[test]
    fn wrn_depth_rule() {
        assert!(WrnConfig::new(16, 1).is_ok());
        assert!(WrnConfig::new(17, 1).is_err());
        assert!(WrnConfig::new(4, 1).is_err());
        let spec = WrnConfig::new(16, 1).unwrap().spec(CIFAR_INPUT, 10);
        spec.validate().unwrap();
        assert_eq!(spec.final_channels().unwrap(), 64);
        assert_eq!(spec.final_extent().unwrap(), (8, 8));
    }

    #[test]
    fn structural_errors() {
        let mut spec = plain_cnn(CIFAR_INPUT, 10, &[(8, 1)]);
        spec.layers.push(Layer::GlobalAvgPool);
        assert!(spec.validate().is_err());
        let spec = plain_cnn(CIFAR_INPUT, 7, &[(8, 1)]);
        let mut wrong = spec.clone();
        wrong.classes = 3;
        assert!(wrong.validate().is_err());
        let bad_residual = ModelSpec {
            input: CIFAR_INPUT,
            classes: 2,
            layers: vec![
                Layer::Residual { body: vec![Layer::conv(4, 3, 1, 1)], shortcut: vec![] },
                Layer::GlobalAvgPool,
                Layer::dense(2),
            ],
        };
        assert!(bad_residual.validate().unwrap_err().to_string().contains("residual"));
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let spec = WrnConfig::new(10, 1).unwrap().spec(CIFAR_INPUT, 10);
        let back = ModelSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(back, spec);
        let bad = r#"{"input":{"channels":1,"height":4,"width":4},"classes":2,"layers":[{"type":"relu","extra":1}]}"#;
        assert!(ModelSpec::from_json(bad).is_err());
    }
}
