//! Dual-branch encoder/decoder with feature-selection gating.
//!
//! Two encoders of identical geometry but separate weights read the visual
//! image and the statistical feature stack. The decoder starts at the deepest
//! scale and, at every scale `ω`, fuses the visual features `θ_ω`, the
//! statistical features `ε_ω` and the previous decoder output `ψ` through a
//! channel gate, then applies a 3×3 convolution and a 2×2 stride-2 transposed
//! convolution. A 1×1 convolution maps the full-resolution result to `K`
//! class logits.

mod checkpoint;

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};

use crate::error::{Error, Result};
use crate::kem::{FeatureStack, NUM_FEATURES};
use crate::ndtensor::gradcheck::{GradReport, FD_STEP};
use crate::ndtensor::{
    concat_channels, conv2d_backward, conv2d_forward, dense, dense_backward, gap, gap_backward,
    maxpool2d, maxpool2d_backward, relu, relu_backward, scale_channels, scale_channels_backward,
    softmax_channels, split_channels, upsample_deconv, upsample_deconv_backward, Activation,
    Padding, PoolIndices, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Visual,
    Statistical,
}

impl Branch {
    /// Factor applied to the branch input before the first convolution.
    pub fn input_scale(self) -> f64 {
        match self {
            Branch::Visual => 1.0 / 255.0,
            Branch::Statistical => 1.0,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Visual => "visual",
            Branch::Statistical => "statistical",
        }
    }
}

/// Network geometry and the ablation toggles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side; must be divisible by `2^depth`.
    pub input_size: usize,
    /// Width of the first encoder stage; later stages double up to `8×`.
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub threshold: f64,
    pub encoder_kernel: usize,
    pub decoder_kernel: usize,
    /// Decoder convolution halves the concatenated channel count.
    pub halve_decoder: bool,
    /// Gate hidden width is `max(concat / gate_reduction, 4)`.
    pub gate_reduction: usize,
    /// Statistical channels fed to the second branch; empty disables it.
    pub feature_channels: Vec<usize>,
    /// Gated fusion; when off the concatenation passes through unscaled.
    pub feature_selection: bool,
    /// Decoder scales (1 = finest) that receive statistical features;
    /// `None` means every scale.
    pub fusion_scales: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            base_channels: 8,
            depth: 4,
            num_classes: 2,
            threshold: 0.5,
            encoder_kernel: 3,
            decoder_kernel: 3,
            halve_decoder: true,
            gate_reduction: 4,
            feature_channels: (0..NUM_FEATURES).collect(),
            feature_selection: true,
            fusion_scales: None,
        }
    }
}

/// Shape and fan-in of one learnable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Channel bookkeeping for one decoder scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusePlan {
    pub scale: usize,
    pub visual: usize,
    pub previous: Option<usize>,
    pub statistical: Option<usize>,
    pub concat: usize,
    pub hidden: usize,
    pub mid: usize,
    pub out: usize,
}

impl FusePlan {
    pub fn part_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.visual];
        v.extend(self.previous);
        v.extend(self.statistical);
        v
    }
}

impl ModelConfig {
    /// The 256-pixel, 64-channel, five-stage geometry.
    pub fn full_scale() -> Self {
        ModelConfig {
            input_size: 256,
            base_channels: 64,
            depth: 5,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 12 {
            return Err(Error::Config(format!(
                "depth must be in 1..=12, got {}",
                self.depth
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if self.base_channels == 0 || self.gate_reduction == 0 {
            return Err(Error::Config(
                "base_channels and gate_reduction must be positive".into(),
            ));
        }
        for k in [self.encoder_kernel, self.decoder_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size must be odd, got {k}")));
            }
        }
        let mut seen = [false; NUM_FEATURES];
        for &c in &self.feature_channels {
            if c >= NUM_FEATURES || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Config(format!(
                    "bad or repeated feature channel {c}"
                )));
            }
        }
        if let Some(scales) = &self.fusion_scales {
            if let Some(&s) = scales.iter().find(|&&s| s == 0 || s > self.depth) {
                return Err(Error::Config(format!(
                    "fusion scale {s} outside 1..={}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|s| self.base_channels << s.min(3))
            .collect()
    }

    pub fn uses_statistics(&self) -> bool {
        !self.feature_channels.is_empty()
            && self.fusion_scales.as_ref().is_none_or(|s| !s.is_empty())
    }

    pub fn fuses_statistics_at(&self, scale: usize) -> bool {
        self.uses_statistics()
            && self
                .fusion_scales
                .as_ref()
                .is_none_or(|s| s.contains(&scale))
    }

    pub fn branch_in_channels(&self, branch: Branch) -> usize {
        match branch {
            Branch::Visual => 3,
            Branch::Statistical => self.feature_channels.len(),
        }
    }

    /// Decoder plans ordered deepest first.
    pub fn decoder_plan(&self) -> Vec<FusePlan> {
        let widths = self.stage_widths();
        let mut prev: Option<usize> = None;
        let mut plans = Vec::with_capacity(self.depth);
        for scale in (1..=self.depth).rev() {
            let w = widths[scale - 1];
            let statistical = self.fuses_statistics_at(scale).then_some(w);
            let concat = w + prev.unwrap_or(0) + statistical.unwrap_or(0);
            let hidden = (concat / self.gate_reduction).max(4);
            let mid = if self.halve_decoder {
                (concat / 2).max(1)
            } else {
                concat
            };
            let out = if scale > 1 {
                widths[scale - 2]
            } else {
                self.base_channels
            };
            plans.push(FusePlan {
                scale,
                visual: w,
                previous: prev,
                statistical,
                concat,
                hidden,
                mid,
                out,
            });
            prev = Some(out);
        }
        plans
    }

    fn encoder_specs(&self, branch: Branch, out: &mut Vec<ParamSpec>) {
        let k = self.encoder_kernel;
        let mut cin = self.branch_in_channels(branch);
        for (s, &w) in self.stage_widths().iter().enumerate() {
            for (ci, from) in [(1, cin), (2, w)] {
                let p = format!("{}.stage{}.conv{}", branch.prefix(), s + 1, ci);
                out.push(ParamSpec {
                    path: format!("{p}.weight"),
                    shape: vec![w, from, k, k],
                    fan_in: from * k * k,
                });
                out.push(ParamSpec {
                    path: format!("{p}.bias"),
                    shape: vec![w],
                    fan_in: from * k * k,
                });
            }
            cin = w;
        }
    }

    /// Every learnable tensor, in forward order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        self.encoder_specs(Branch::Visual, &mut specs);
        if self.uses_statistics() {
            self.encoder_specs(Branch::Statistical, &mut specs);
        }
        let k = self.decoder_kernel;
        for plan in self.decoder_plan() {
            let p = format!("decoder.fuse{}", plan.scale);
            if self.feature_selection {
                specs.push(ParamSpec {
                    path: format!("{p}.gate1.weight"),
                    shape: vec![plan.hidden, plan.concat],
                    fan_in: plan.concat,
                });
                specs.push(ParamSpec {
                    path: format!("{p}.gate1.bias"),
                    shape: vec![plan.hidden],
                    fan_in: plan.concat,
                });
                specs.push(ParamSpec {
                    path: format!("{p}.gate2.weight"),
                    shape: vec![plan.concat, plan.hidden],
                    fan_in: plan.hidden,
                });
                specs.push(ParamSpec {
                    path: format!("{p}.gate2.bias"),
                    shape: vec![plan.concat],
                    fan_in: plan.hidden,
                });
            }
            specs.push(ParamSpec {
                path: format!("{p}.conv.weight"),
                shape: vec![plan.mid, plan.concat, k, k],
                fan_in: plan.concat * k * k,
            });
            specs.push(ParamSpec {
                path: format!("{p}.conv.bias"),
                shape: vec![plan.mid],
                fan_in: plan.concat * k * k,
            });
            specs.push(ParamSpec {
                path: format!("{p}.deconv.weight"),
                shape: vec![plan.mid, plan.out, 2, 2],
                fan_in: plan.mid,
            });
            specs.push(ParamSpec {
                path: format!("{p}.deconv.bias"),
                shape: vec![plan.out],
                fan_in: plan.mid,
            });
        }
        specs.push(ParamSpec {
            path: "head.weight".into(),
            shape: vec![self.num_classes, self.base_channels, 1, 1],
            fan_in: self.base_channels,
        });
        specs.push(ParamSpec {
            path: "head.bias".into(),
            shape: vec![self.num_classes],
            fan_in: self.base_channels,
        });
        specs
    }

    /// `(channels, side)` of each encoder stage output.
    pub fn stage_shapes(&self) -> Vec<(usize, usize)> {
        self.stage_widths()
            .iter()
            .enumerate()
            .map(|(s, &w)| (w, self.input_size >> (s + 1)))
            .collect()
    }
}

/// All learnable tensors keyed by layer path.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

fn path_seed(seed: u64, path: &str) -> u64 {
    // FNV-1a; stable across platforms and releases
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl ModelParams {
    /// He-uniform weights (`±√(6/fan_in)`), zero biases. Each tensor draws
    /// from its own stream seeded by `(seed, path)`, so variants that share a
    /// layer path start from identical values.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for spec in config.param_specs() {
            let t = if spec.path.ends_with(".bias") {
                Tensor::zeros(&spec.shape)
            } else {
                let bound = (6.0 / spec.fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, &spec.path));
                let data = (0..spec.numel())
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Tensor::from_vec(&spec.shape, data)?
            };
            tensors.insert(spec.path, t);
        }
        Ok(ModelParams { tensors })
    }

    pub fn zeros_like(other: &ModelParams) -> Self {
        ModelParams {
            tensors: other
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::Config(format!("missing parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        self.tensors.insert(path.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Adds `other` into `self` path by path (missing paths are inserted).
    pub fn accumulate(&mut self, other: &ModelParams) -> Result<()> {
        for (k, v) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(t) => t.add_assign(v)?,
                None => {
                    self.tensors.insert(k.clone(), v.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors.values_mut() {
            t.scale(k);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Checks the path set and every shape against `config`.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let specs = config.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "config expects {} tensors, parameters hold {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for s in specs {
            let t = self.get(&s.path)?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::shape(
                    "model_params",
                    format!("{}: {:?} vs {:?}", s.path, t.shape(), s.shape),
                ));
            }
        }
        Ok(())
    }
}

/// Binary `H × W` mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MaskImage {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl MaskImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!(
                    "{height}×{width} needs {} values, got {}",
                    height * width,
                    data.len()
                ),
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
        Ok(MaskImage {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        MaskImage {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Per-pixel probability of `class` under a channel softmax of `logits`.
pub fn class_probability(logits: &Tensor, class: usize) -> Result<Vec<f64>> {
    let (k, _, _) = logits.dims3()?;
    if class >= k {
        return Err(Error::shape(
            "class_probability",
            format!("class {class} of {k}"),
        ));
    }
    Ok(softmax_channels(logits)?.channel(class).to_vec())
}

/// Foreground iff the class-1 softmax probability is `>= threshold`.
pub fn predict_mask(logits: &Tensor, threshold: f64) -> Result<MaskImage> {
    let (k, h, w) = logits.dims3()?;
    if k != 2 {
        return Err(Error::shape(
            "predict_mask",
            format!("expected 2 classes, got {k}"),
        ));
    }
    let p = class_probability(logits, 1)?;
    Ok(MaskImage {
        height: h,
        width: w,
        data: p.iter().map(|&v| (v >= threshold) as u8).collect(),
    })
}

/// Parameters of the two-layer gate `sigmoid(W2 · relu(W1 · gap + b1) + b2)`.
#[derive(Clone, Copy, Debug)]
pub struct GateParams<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a [f64],
    pub w2: &'a Tensor,
    pub b2: &'a [f64],
}

/// Intermediate values of one feature-selection block.
#[derive(Clone, Debug)]
pub struct FeatureSelectOutput {
    pub concat: Tensor,
    pub pooled: Vec<f64>,
    pub hidden: Vec<f64>,
    /// One gate per concatenated channel; all ones when gating is off.
    pub gates: Vec<f64>,
    pub output: Tensor,
}

/// Concatenates `parts`, derives a gate per channel from the global average
/// of the concatenation and scales each channel by its gate.
pub fn feature_select(
    parts: &[&Tensor],
    gate: Option<GateParams<'_>>,
) -> Result<FeatureSelectOutput> {
    let concat = concat_channels(parts)?;
    match gate {
        None => {
            let c = concat.shape()[0];
            Ok(FeatureSelectOutput {
                output: concat.clone(),
                concat,
                pooled: vec![],
                hidden: vec![],
                gates: vec![1.0; c],
            })
        }
        Some(g) => {
            let pooled = gap(&concat)?;
            let hidden = dense(&pooled, g.w1, g.b1, Activation::Relu)?;
            let gates = dense(&hidden, g.w2, g.b2, Activation::Sigmoid)?;
            let output = scale_channels(&concat, &gates)?;
            Ok(FeatureSelectOutput {
                concat,
                pooled,
                hidden,
                gates,
                output,
            })
        }
    }
}

#[derive(Clone, Debug)]
struct StageCache {
    input: Tensor,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    pool: PoolIndices,
    output: Tensor,
}

#[derive(Clone, Debug)]
struct FuseCache {
    plan: FusePlan,
    select: FeatureSelectOutput,
    conv_pre: Tensor,
    conv_act: Tensor,
    deconv_pre: Tensor,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    visual: Vec<StageCache>,
    statistical: Vec<StageCache>,
    /// Deepest scale first.
    fuse: Vec<FuseCache>,
    head_input: Tensor,
    pub logits: Tensor,
}

impl ForwardCache {
    /// Hash of every ReLU on/off state and every pooling argmax. Two
    /// evaluations with equal patterns lie in the same smooth piece of the
    /// network function.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let signs = |t: &Tensor, h: &mut DefaultHasher| {
            for chunk in t.data().chunks(64) {
                let mut bits = 0u64;
                for (i, &v) in chunk.iter().enumerate() {
                    bits |= ((v > 0.0) as u64) << i;
                }
                bits.hash(h);
            }
        };
        for s in self.visual.iter().chain(&self.statistical) {
            signs(&s.pre1, &mut h);
            signs(&s.pre2, &mut h);
            s.pool.argmax.hash(&mut h);
        }
        for f in &self.fuse {
            for &v in &f.select.hidden {
                (v > 0.0).hash(&mut h);
            }
            signs(&f.conv_pre, &mut h);
            signs(&f.deconv_pre, &mut h);
        }
        h.finish()
    }

    pub fn visual_stages(&self) -> Vec<&Tensor> {
        self.visual.iter().map(|s| &s.output).collect()
    }

    pub fn statistical_stages(&self) -> Vec<&Tensor> {
        self.statistical.iter().map(|s| &s.output).collect()
    }

    /// Gate vectors per decoder scale, deepest first.
    pub fn gates(&self) -> Vec<&[f64]> {
        self.fuse
            .iter()
            .map(|f| f.select.gates.as_slice())
            .collect()
    }
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DbSfNet {
    config: ModelConfig,
    params: ModelParams,
}

impl DbSfNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(DbSfNet { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(DbSfNet { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ModelParams) {
        (self.config, self.params)
    }

    fn p(&self, path: &str) -> Result<&Tensor> {
        self.params.get(path)
    }

    fn stage_forward(&self, branch: Branch, stage: usize, input: Tensor) -> Result<StageCache> {
        let prefix = format!("{}.stage{}", branch.prefix(), stage);
        let pre1 = conv2d_forward(
            &input,
            self.p(&format!("{prefix}.conv1.weight"))?,
            self.p(&format!("{prefix}.conv1.bias"))?.data(),
            1,
            Padding::SameZero,
        )?;
        let act1 = relu(&pre1);
        let pre2 = conv2d_forward(
            &act1,
            self.p(&format!("{prefix}.conv2.weight"))?,
            self.p(&format!("{prefix}.conv2.bias"))?.data(),
            1,
            Padding::SameZero,
        )?;
        let (output, pool) = maxpool2d(&relu(&pre2), 2)?;
        Ok(StageCache {
            input,
            pre1,
            act1,
            pre2,
            pool,
            output,
        })
    }

    fn encode_cached(&self, input: &Tensor, branch: Branch) -> Result<Vec<StageCache>> {
        let (c, h, w) = input.dims3()?;
        let expect = self.config.branch_in_channels(branch);
        if c != expect || h != self.config.input_size || w != self.config.input_size {
            return Err(Error::shape(
                "encode_branch",
                format!(
                    "{} branch expects {}×{}×{}, got {}×{}×{}",
                    branch.prefix(),
                    expect,
                    self.config.input_size,
                    self.config.input_size,
                    c,
                    h,
                    w
                ),
            ));
        }
        let mut stages: Vec<StageCache> = Vec::with_capacity(self.config.depth);
        let k = branch.input_scale();
        let mut x = if k == 1.0 {
            input.clone()
        } else {
            input.map(|v| v * k)
        };
        for s in 1..=self.config.depth {
            let cache = self.stage_forward(branch, s, x)?;
            x = cache.output.clone();
            stages.push(cache);
        }
        Ok(stages)
    }

    /// Stage outputs `[θ_1 … θ_depth]` (or `ε`) of one encoder branch.
    pub fn encode_branch(&self, input: &Tensor, branch: Branch) -> Result<Vec<Tensor>> {
        if branch == Branch::Statistical && !self.config.uses_statistics() {
            return Err(Error::Config(
                "statistical branch is disabled in this configuration".into(),
            ));
        }
        Ok(self
            .encode_cached(input, branch)?
            .into_iter()
            .map(|s| s.output)
            .collect())
    }

    fn gate_params(&self, scale: usize) -> Result<Option<GateParams<'_>>> {
        if !self.config.feature_selection {
            return Ok(None);
        }
        let p = format!("decoder.fuse{scale}");
        Ok(Some(GateParams {
            w1: self.p(&format!("{p}.gate1.weight"))?,
            b1: self.p(&format!("{p}.gate1.bias"))?.data(),
            w2: self.p(&format!("{p}.gate2.weight"))?,
            b2: self.p(&format!("{p}.gate2.bias"))?.data(),
        }))
    }

    /// Selects the configured channels of a feature stack for the
    /// statistical branch.
    pub fn statistical_input(&self, feats: &FeatureStack) -> Result<Tensor> {
        feats.select(&self.config.feature_channels)
    }

    pub fn forward_cached(&self, visual: &Tensor, feats: &FeatureStack) -> Result<ForwardCache> {
        let vis = self.encode_cached(visual, Branch::Visual)?;
        let stat = if self.config.uses_statistics() {
            self.encode_cached(&self.statistical_input(feats)?, Branch::Statistical)?
        } else {
            Vec::new()
        };

        let mut fuse = Vec::with_capacity(self.config.depth);
        let mut previous: Option<Tensor> = None;
        for plan in self.config.decoder_plan() {
            let s = plan.scale;
            let mut parts: Vec<&Tensor> = vec![&vis[s - 1].output];
            if let Some(p) = &previous {
                parts.push(p);
            }
            if plan.statistical.is_some() {
                parts.push(&stat[s - 1].output);
            }
            let select = feature_select(&parts, self.gate_params(s)?)?;
            let p = format!("decoder.fuse{s}");
            let conv_pre = conv2d_forward(
                &select.output,
                self.p(&format!("{p}.conv.weight"))?,
                self.p(&format!("{p}.conv.bias"))?.data(),
                1,
                Padding::SameZero,
            )?;
            let conv_act = relu(&conv_pre);
            let deconv_pre = upsample_deconv(
                &conv_act,
                self.p(&format!("{p}.deconv.weight"))?,
                self.p(&format!("{p}.deconv.bias"))?.data(),
                2,
            )?;
            previous = Some(relu(&deconv_pre));
            fuse.push(FuseCache {
                plan,
                select,
                conv_pre,
                conv_act,
                deconv_pre,
            });
        }
        let head_input = previous.expect("depth >= 1");
        let logits = conv2d_forward(
            &head_input,
            self.p("head.weight")?,
            self.p("head.bias")?.data(),
            1,
            Padding::SameZero,
        )?;
        Ok(ForwardCache {
            visual: vis,
            statistical: stat,
            fuse,
            head_input,
            logits,
        })
    }

    /// Class logits `K × H × W`.
    pub fn forward(&self, visual: &Tensor, feats: &FeatureStack) -> Result<Tensor> {
        Ok(self.forward_cached(visual, feats)?.logits)
    }

    fn stage_backward(
        &self,
        branch: Branch,
        stage: usize,
        cache: &StageCache,
        upstream: &Tensor,
        grads: &mut ModelParams,
    ) -> Result<Tensor> {
        let prefix = format!("{}.stage{}", branch.prefix(), stage);
        let d_act2 = maxpool2d_backward(&cache.pool, upstream)?;
        let d_pre2 = relu_backward(&cache.pre2, &d_act2)?;
        let g2 = conv2d_backward(
            &cache.act1,
            self.p(&format!("{prefix}.conv2.weight"))?,
            1,
            Padding::SameZero,
            &d_pre2,
        )?;
        let d_pre1 = relu_backward(&cache.pre1, &g2.input_grad)?;
        let g1 = conv2d_backward(
            &cache.input,
            self.p(&format!("{prefix}.conv1.weight"))?,
            1,
            Padding::SameZero,
            &d_pre1,
        )?;
        for (name, g) in [("conv2", g2.param_grads), ("conv1", g1.param_grads.clone())] {
            for (k, t) in g {
                grads.insert(format!("{prefix}.{name}.{k}"), t);
            }
        }
        Ok(g1.input_grad)
    }

    fn encoder_backward(
        &self,
        branch: Branch,
        stages: &[StageCache],
        mut from_decoder: Vec<Option<Tensor>>,
        grads: &mut ModelParams,
    ) -> Result<()> {
        let mut carry: Option<Tensor> = None;
        for s in (1..=stages.len()).rev() {
            let cache = &stages[s - 1];
            let mut up = Tensor::zeros(cache.output.shape());
            if let Some(d) = from_decoder[s - 1].take() {
                up.add_assign(&d)?;
            }
            if let Some(c) = carry.take() {
                up.add_assign(&c)?;
            }
            carry = Some(self.stage_backward(branch, s, cache, &up, grads)?);
        }
        Ok(())
    }

    /// Parameter gradients of a scalar loss given `∂loss/∂logits`.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<ModelParams> {
        let mut grads = ModelParams::default();
        let head = conv2d_backward(
            &cache.head_input,
            self.p("head.weight")?,
            1,
            Padding::SameZero,
            d_logits,
        )?;
        for (k, t) in head.param_grads {
            grads.insert(format!("head.{k}"), t);
        }
        let depth = self.config.depth;
        let mut d_vis: Vec<Option<Tensor>> = vec![None; depth];
        let mut d_stat: Vec<Option<Tensor>> = vec![None; depth];
        let mut d_prev = head.input_grad;

        for f in cache.fuse.iter().rev() {
            let s = f.plan.scale;
            let p = format!("decoder.fuse{s}");
            let d_deconv_pre = relu_backward(&f.deconv_pre, &d_prev)?;
            let gd = upsample_deconv_backward(
                &f.conv_act,
                self.p(&format!("{p}.deconv.weight"))?,
                2,
                &d_deconv_pre,
            )?;
            let d_conv_pre = relu_backward(&f.conv_pre, &gd.input_grad)?;
            let gc = conv2d_backward(
                &f.select.output,
                self.p(&format!("{p}.conv.weight"))?,
                1,
                Padding::SameZero,
                &d_conv_pre,
            )?;
            for (k, t) in gd.param_grads {
                grads.insert(format!("{p}.deconv.{k}"), t);
            }
            for (k, t) in gc.param_grads {
                grads.insert(format!("{p}.conv.{k}"), t);
            }

            let d_concat = match self.gate_params(s)? {
                None => gc.input_grad,
                Some(g) => {
                    let (mut d_concat, d_gates) =
                        scale_channels_backward(&f.select.concat, &f.select.gates, &gc.input_grad)?;
                    let g2 = dense_backward(
                        &f.select.hidden,
                        g.w2,
                        &f.select.gates,
                        Activation::Sigmoid,
                        &d_gates,
                    )?;
                    let g1 = dense_backward(
                        &f.select.pooled,
                        g.w1,
                        &f.select.hidden,
                        Activation::Relu,
                        g2.input_grad.data(),
                    )?;
                    d_concat.add_assign(&gap_backward(
                        f.select.concat.shape(),
                        g1.input_grad.data(),
                    )?)?;
                    for (name, lg) in [("gate2", g2.param_grads), ("gate1", g1.param_grads)] {
                        for (k, t) in lg {
                            grads.insert(format!("{p}.{name}.{k}"), t);
                        }
                    }
                    d_concat
                }
            };
            let mut pieces = split_channels(&d_concat, &f.plan.part_sizes())?.into_iter();
            d_vis[s - 1] = pieces.next();
            if f.plan.previous.is_some() {
                d_prev = pieces.next().expect("previous-scale slice");
            }
            if f.plan.statistical.is_some() {
                d_stat[s - 1] = pieces.next();
            }
        }

        self.encoder_backward(Branch::Visual, &cache.visual, d_vis, &mut grads)?;
        if !cache.statistical.is_empty() {
            self.encoder_backward(Branch::Statistical, &cache.statistical, d_stat, &mut grads)?;
        }
        Ok(grads)
    }
}

/// Per-pixel softmax cross-entropy.
fn pixel_losses(logits: &Tensor, mask: &MaskImage) -> Vec<f64> {
    let hw = mask.height * mask.width;
    let k = logits.shape()[0];
    let y = logits.data();
    (0..hw)
        .map(|i| {
            let max = (0..k)
                .map(|c| y[c * hw + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..k)
                    .map(|c| (y[c * hw + i] - max).exp())
                    .sum::<f64>()
                    .ln();
            lse - y[mask.data()[i] as usize * hw + i]
        })
        .collect()
}

/// Central finite differences of the mean cross-entropy loss for up to
/// `per_tensor` randomly chosen entries of every parameter tensor.
///
/// Pixel losses of the ±h evaluations are subtracted before averaging, which
/// keeps cancellation error well below the tolerance. Entries whose ±h
/// evaluations flip any ReLU or pooling decision are skipped and replaced.
pub fn check_network_gradients<R: Rng>(
    net: &DbSfNet,
    visual: &Tensor,
    feats: &FeatureStack,
    mask: &MaskImage,
    per_tensor: usize,
    rng: &mut R,
) -> Result<GradReport> {
    let cache = net.forward_cached(visual, feats)?;
    let (_, d_logits) = crate::trainer::loss(&cache.logits, mask)?;
    let grads = net.backward(&cache, &d_logits)?;
    let pattern = cache.activation_pattern();
    let perturbed = |path: &str, idx: usize, delta: f64| -> Result<Option<Vec<f64>>> {
        let mut n = net.clone();
        n.params
            .tensors
            .get_mut(path)
            .expect("known path")
            .data_mut()[idx] += delta;
        let c = n.forward_cached(visual, feats)?;
        Ok((c.activation_pattern() == pattern).then(|| pixel_losses(&c.logits, mask)))
    };

    let mut report = GradReport::default();
    for (ti, (path, t)) in net.params.iter().enumerate() {
        let want = per_tensor.min(t.len());
        let mut accepted = 0;
        for idx in sample(rng, t.len(), t.len()) {
            if accepted == want {
                break;
            }
            let (Some(lp), Some(lm)) = (
                perturbed(path, idx, FD_STEP)?,
                perturbed(path, idx, -FD_STEP)?,
            ) else {
                continue;
            };
            let numeric = lp.iter().zip(&lm).map(|(a, b)| a - b).sum::<f64>()
                / lp.len() as f64
                / (2.0 * FD_STEP);
            report.record(ti, idx, grads.get(path)?.data()[idx], numeric);
            accepted += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
