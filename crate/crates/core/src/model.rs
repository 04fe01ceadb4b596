//! Backbone presets, adapter injection, the MLP head and parameter/FLOP
//! accounting.
//!
//! The backbone is a 3D bottleneck ResNet whose convolutions and
//! normalization statistics are frozen. Every convolution (stem, bottleneck
//! and shortcut projections) carries a [`LoraAdapter`] unless excluded by
//! name. Only adapter factors and head parameters are trainable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{lora_param_count, AdaptedConv3d, LoraAdapter};
use crate::nn::{
    conv_output_extent, global_avg_pool, global_avg_pool_backward, relu, relu_backward, Conv3d,
    Dropout, FrozenNorm, Linear, MaxPool3d,
};
use crate::rng::RandomSource;
use crate::tensor::{Scalar, Tensor};

/// Gradients keyed by registry name, e.g. `layer1.0.conv2.lora_a`.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

/// Named tensor table.
pub type TensorMap<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub width: usize,
    /// 3³ stride-2 max pooling after the stem.
    pub max_pool: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    /// Bottleneck (inner) width.
    pub width: usize,
    pub out_width: usize,
    /// Stride of the first block in the stage.
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
}

pub const PRESETS: [&str; 2] = ["resnet50-3d", "tiny"];

impl BackboneConfig {
    /// Bottleneck 3D ResNet-50: stages (3, 4, 6, 3), widths (64, 128, 256,
    /// 512) × 4, 7³ stride-2 stem with max pooling.
    pub fn resnet50_3d(in_channels: usize) -> Self {
        let stage = |blocks, width: usize, stride| StageSpec {
            blocks,
            width,
            out_width: width * 4,
            stride,
        };
        Self {
            in_channels,
            stem: StemSpec {
                kernel: 7,
                stride: 2,
                width: 64,
                max_pool: true,
            },
            stages: vec![stage(3, 64, 1), stage(4, 128, 2), stage(6, 256, 2), stage(3, 512, 2)],
        }
    }

    /// Desk-scale variant: stages (1, 1), widths (8, 16) × 2.
    pub fn tiny(in_channels: usize) -> Self {
        Self {
            in_channels,
            stem: StemSpec {
                kernel: 3,
                stride: 2,
                width: 8,
                max_pool: false,
            },
            stages: vec![
                StageSpec {
                    blocks: 1,
                    width: 8,
                    out_width: 16,
                    stride: 1,
                },
                StageSpec {
                    blocks: 1,
                    width: 16,
                    out_width: 32,
                    stride: 2,
                },
            ],
        }
    }

    pub fn preset(name: &str, in_channels: usize) -> Result<Self> {
        match name {
            "resnet50-3d" => Ok(Self::resnet50_3d(in_channels)),
            "tiny" => Ok(Self::tiny(in_channels)),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {PRESETS:?})"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stem;
        if self.in_channels == 0 || s.kernel == 0 || s.stride == 0 || s.width == 0 {
            return Err(Error::Config("backbone stem values must be positive".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        for st in &self.stages {
            if st.blocks == 0 || st.width == 0 || st.out_width == 0 || st.stride == 0 {
                return Err(Error::Config("backbone stage values must be positive".into()));
            }
        }
        Ok(())
    }

    /// Width of the pooled feature vector (last stage output width).
    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(self.stem.width, |s| s.out_width)
    }

    /// Every convolution in forward order.
    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        let mut specs = vec![ConvSpec {
            name: "stem.conv".into(),
            d_in: self.in_channels,
            d_out: self.stem.width,
            kernel: self.stem.kernel,
            stride: self.stem.stride,
            padding: self.stem.kernel / 2,
        }];
        let mut channels = self.stem.width;
        for (si, stage) in self.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let prefix = format!("layer{}.{bi}", si + 1);
                let stride = if bi == 0 { stage.stride } else { 1 };
                let conv = |suffix: &str, d_in, d_out, kernel, stride| ConvSpec {
                    name: format!("{prefix}.{suffix}"),
                    d_in,
                    d_out,
                    kernel,
                    stride,
                    padding: kernel / 2,
                };
                specs.push(conv("conv1", channels, stage.width, 1, 1));
                specs.push(conv("conv2", stage.width, stage.width, 3, stride));
                specs.push(conv("conv3", stage.width, stage.out_width, 1, 1));
                if stride != 1 || channels != stage.out_width {
                    specs.push(conv("downsample.conv", channels, stage.out_width, 1, stride));
                }
                channels = stage.out_width;
            }
        }
        specs
    }
}

/// Static description of one backbone convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSettings {
    pub rank: usize,
    pub scale: f64,
    /// Convolutions left without an adapter, matched by name or name prefix.
    pub exclude: Vec<String>,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: crate::lora::DEFAULT_RANK,
            scale: 1.0,
            exclude: Vec::new(),
        }
    }
}

impl LoraSettings {
    pub fn adapts(&self, conv_name: &str) -> bool {
        !self
            .exclude
            .iter()
            .any(|p| conv_name == p || conv_name.starts_with(&format!("{p}.")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSettings {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for HeadSettings {
    fn default() -> Self {
        Self {
            hidden: 128,
            dropout: 0.5,
        }
    }
}

/// Per-layer and total trainable parameter counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub breakdown: Vec<(String, usize)>,
}

pub fn head_param_count(feature_dim: usize, hidden: usize) -> usize {
    feature_dim * hidden + hidden + hidden + 1
}

/// Trainable parameters implied by a configuration, without building weights.
pub fn count_trainable(config: &BackboneConfig, lora: &LoraSettings, head: &HeadSettings) -> ParamCount {
    let mut breakdown: Vec<(String, usize)> = config
        .conv_specs()
        .into_iter()
        .filter(|s| lora.adapts(&s.name))
        .map(|s| {
            let n = lora_param_count(s.d_out, s.d_in, s.kernel, lora.rank);
            (s.name, n)
        })
        .collect();
    let f = config.feature_dim();
    breakdown.push(("head.fc1".into(), f * head.hidden + head.hidden));
    breakdown.push(("head.fc2".into(), head.hidden + 1));
    ParamCount {
        total: breakdown.iter().map(|(_, n)| n).sum(),
        breakdown,
    }
}

/// Multiply-accumulate counts for one forward pass of one sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub rows: Vec<(String, u64)>,
    pub conv_macs: u64,
    pub head_macs: u64,
    pub total_macs: u64,
    /// `2 × total_macs`
    pub total_flops: u64,
}

/// Per convolution `d_out·d_in·k³·output voxels`, plus the head's linear
/// layers. Adapters are assumed merged, so they add nothing.
pub fn flops_estimate(config: &BackboneConfig, head: &HeadSettings, input: [usize; 3]) -> Result<FlopReport> {
    let mut rows = Vec::new();
    for (spec, _, out) in planned_extents(config, input)? {
        let voxels: u64 = out.iter().map(|&e| e as u64).product();
        let k3 = (spec.kernel * spec.kernel * spec.kernel) as u64;
        rows.push((spec.name, spec.d_out as u64 * spec.d_in as u64 * k3 * voxels));
    }
    let conv_macs: u64 = rows.iter().map(|(_, m)| m).sum();
    let f = config.feature_dim() as u64;
    let h = head.hidden as u64;
    rows.push(("head.fc1".into(), f * h));
    rows.push(("head.fc2".into(), h));
    let head_macs = f * h + h;
    let total_macs = conv_macs + head_macs;
    Ok(FlopReport {
        rows,
        conv_macs,
        head_macs,
        total_macs,
        total_flops: 2 * total_macs,
    })
}

/// Conv specs paired with their input and output extents.
pub fn planned_extents(config: &BackboneConfig, input: [usize; 3]) -> Result<Vec<(ConvSpec, [usize; 3], [usize; 3])>> {
    if input.contains(&0) {
        return Err(Error::shape(format!("input extents must be positive, got {input:?}")));
    }
    let out_of = |spec: &ConvSpec, ext: [usize; 3]| -> Result<[usize; 3]> {
        let mut o = [0; 3];
        for a in 0..3 {
            o[a] = conv_output_extent(ext[a], spec.kernel, spec.stride, spec.padding).ok_or_else(|| {
                Error::shape(format!("{}: extents {ext:?} too small", spec.name))
            })?;
        }
        Ok(o)
    };
    let mut plan = Vec::new();
    let mut ext = input;
    let mut block_in = input;
    for spec in config.conv_specs() {
        if spec.name.ends_with(".conv1") {
            block_in = ext;
        }
        let shortcut = spec.name.ends_with("downsample.conv");
        let src = if shortcut { block_in } else { ext };
        let out = out_of(&spec, src)?;
        plan.push((spec.clone(), src, out));
        if !shortcut {
            ext = out;
        }
        if spec.name == "stem.conv" && config.stem.max_pool {
            ext = STEM_POOL.output_extents(ext)?;
        }
    }
    Ok(plan)
}

const STEM_POOL: MaxPool3d = MaxPool3d {
    kernel: 3,
    stride: 2,
    padding: 1,
};

/// Convolution, frozen norm and (optionally) ReLU, sharing one registry name
/// prefix for the conv and one for the norm.
#[derive(Clone, Debug, PartialEq)]
struct ConvNorm<T> {
    conv_name: String,
    norm_name: String,
    conv: AdaptedConv3d<T>,
    norm: FrozenNorm<T>,
}

impl<T: Scalar> ConvNorm<T> {
    fn forward(&self, x: &Tensor<T>, parallel: bool) -> Result<Tensor<T>> {
        let h = if parallel {
            self.conv.forward_parallel(x)?
        } else {
            self.conv.forward(x)?
        };
        self.norm.forward(&h)
    }

    fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>, grads: &mut Gradients<T>) -> Result<Tensor<T>> {
        let g = self.norm.backward(grad_out)?;
        let lg = self.conv.backward(x, &g)?;
        for (k, v) in lg.params {
            grads.insert(format!("{}.{k}", self.conv_name), v);
        }
        Ok(lg.input)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Bottleneck<T> {
    unit1: ConvNorm<T>,
    unit2: ConvNorm<T>,
    unit3: ConvNorm<T>,
    shortcut: Option<ConvNorm<T>>,
}

struct BlockCache<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
    out: Tensor<T>,
}

impl<T: Scalar> Bottleneck<T> {
    fn forward(&self, x: &Tensor<T>, parallel: bool) -> Result<(Tensor<T>, BlockCache<T>)> {
        let a1 = relu(&self.unit1.forward(x, parallel)?);
        let a2 = relu(&self.unit2.forward(&a1, parallel)?);
        let h3 = self.unit3.forward(&a2, parallel)?;
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(x, parallel)?,
            None => x.clone(),
        };
        let out = relu(&h3.add(&skip)?);
        Ok((
            out.clone(),
            BlockCache {
                x: x.clone(),
                a1,
                a2,
                out,
            },
        ))
    }

    fn backward(&self, c: &BlockCache<T>, grad_out: &Tensor<T>, grads: &mut Gradients<T>) -> Result<Tensor<T>> {
        let g_sum = relu_backward(&c.out, grad_out)?;
        let g_a2 = self.unit3.backward(&c.a2, &g_sum, grads)?;
        let g_h2 = relu_backward(&c.a2, &g_a2)?;
        let g_a1 = self.unit2.backward(&c.a1, &g_h2, grads)?;
        let g_h1 = relu_backward(&c.a1, &g_a1)?;
        let mut g_x = self.unit1.backward(&c.x, &g_h1, grads)?;
        match &self.shortcut {
            Some(sc) => g_x.add_assign(&sc.backward(&c.x, &g_sum, grads)?)?,
            None => g_x.add_assign(&g_sum)?,
        }
        Ok(g_x)
    }

    fn units(&self) -> impl Iterator<Item = &ConvNorm<T>> {
        [&self.unit1, &self.unit2, &self.unit3].into_iter().chain(self.shortcut.as_ref())
    }

    fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvNorm<T>> {
        [&mut self.unit1, &mut self.unit2, &mut self.unit3]
            .into_iter()
            .chain(self.shortcut.as_mut())
    }
}

/// Two-layer MLP: `linear(F → hidden) → GELU → dropout → linear(hidden → 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead<T> {
    pub fc1: Linear<T>,
    pub dropout: Dropout,
    pub fc2: Linear<T>,
}

struct HeadCache<T> {
    features: Tensor<T>,
    pre: Tensor<T>,
    hidden: Tensor<T>,
    mask: Option<Tensor<T>>,
}

impl<T: Scalar> MlpHead<T> {
    pub fn init(features: usize, settings: &HeadSettings, rng: &mut RandomSource) -> Result<Self> {
        Ok(Self {
            fc1: Linear::he_init(features, settings.hidden, rng)?,
            dropout: Dropout::new(settings.dropout)?,
            fc2: Linear::he_init(settings.hidden, 1, rng)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    fn forward(&self, features: &Tensor<T>, rng: Option<&mut RandomSource>) -> Result<(Tensor<T>, HeadCache<T>)> {
        let pre = self.fc1.forward(features)?;
        let act = crate::nn::gelu(&pre);
        let (hidden, mask) = match rng {
            Some(rng) if self.dropout.training => self.dropout.forward(&act, rng),
            _ => (act, None),
        };
        let logits = self.fc2.forward(&hidden)?;
        let n = logits.len();
        Ok((
            logits.reshape([n])?,
            HeadCache {
                features: features.clone(),
                pre,
                hidden,
                mask,
            },
        ))
    }

    fn backward(&self, c: &HeadCache<T>, grad_logits: &Tensor<T>, grads: &mut Gradients<T>) -> Result<Tensor<T>> {
        let n = grad_logits.len();
        let g2 = self.fc2.backward(&c.hidden, &grad_logits.clone().reshape([n, 1])?)?;
        let g_act = Dropout::backward(&g2.input, c.mask.as_ref())?;
        let g_pre = crate::nn::gelu_backward(&c.pre, &g_act)?;
        let g1 = self.fc1.backward(&c.features, &g_pre)?;
        for (layer, lg) in [("fc1", g1.params), ("fc2", g2.params)] {
            for (k, v) in lg {
                grads.insert(format!("head.{layer}.{k}"), v);
            }
        }
        Ok(g1.input)
    }
}

/// Which way adapted convolutions evaluate the low-rank update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AdapterPath {
    /// Fold `ΔW` into the kernel before convolving.
    #[default]
    Merged,
    /// Convolve with `W` and `ΔW` separately and add.
    Parallel,
}

/// Frozen backbone + adapters + trainable head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    config: BackboneConfig,
    stem: ConvNorm<T>,
    stem_pool: Option<MaxPool3d>,
    blocks: Vec<Bottleneck<T>>,
    pub head: MlpHead<T>,
    adapter_path: AdapterPath,
}

/// Forward state kept for the backward pass.
pub struct ForwardCache<T> {
    input: Tensor<T>,
    stem_pre_pool: Tensor<T>,
    pool_argmax: Option<Vec<usize>>,
    blocks: Vec<BlockCache<T>>,
    last_shape: Vec<usize>,
    head: HeadCache<T>,
}

/// Whether a registry entry is frozen backbone state or trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Frozen,
    Trainable,
}

fn random_norm<T: Scalar>(channels: usize, rng: &mut RandomSource) -> Result<FrozenNorm<T>> {
    let scale = Tensor::randn([channels], rng, 1.0, 0.1)?;
    let shift = Tensor::randn([channels], rng, 0.0, 0.1)?;
    let mean = Tensor::randn([channels], rng, 0.0, 0.1)?;
    let mut var = Tensor::randn([channels], rng, 0.0, 0.1)?;
    var.data_mut().iter_mut().for_each(|v: &mut T| *v = T::one() + v.abs());
    FrozenNorm::new(scale, shift, mean, var, FrozenNorm::<T>::DEFAULT_EPS)
}

/// Build a classifier.
///
/// Backbone weights come from `weights` when given (every frozen tensor must
/// be present with matching shape), otherwise from He-normal draws on
/// `backbone_rng`. Adapters and then the head are initialized from
/// `init_rng`.
pub fn build_classifier<T: Scalar>(
    config: &BackboneConfig,
    lora: &LoraSettings,
    head: &HeadSettings,
    weights: Option<&TensorMap<T>>,
    backbone_rng: &mut RandomSource,
    init_rng: &mut RandomSource,
) -> Result<Classifier<T>> {
    config.validate()?;
    if lora.rank == 0 {
        return Err(Error::Config("LoRA rank must be positive".into()));
    }
    let mut units = Vec::new();
    for spec in config.conv_specs() {
        let fan_in = spec.d_in * spec.kernel.pow(3);
        let (w, norm) = if weights.is_some() {
            (
                Tensor::zeros([spec.d_out, spec.d_in, spec.kernel, spec.kernel, spec.kernel])?,
                FrozenNorm::identity(spec.d_out)?,
            )
        } else {
            let w = Tensor::randn(
                [spec.d_out, spec.d_in, spec.kernel, spec.kernel, spec.kernel],
                backbone_rng,
                0.0,
                (2.0 / fan_in as f64).sqrt(),
            )?;
            (w, random_norm(spec.d_out, backbone_rng)?)
        };
        let conv = Conv3d::new(w, None, [spec.stride; 3], [spec.padding; 3])?;
        let norm_name = spec.name.replacen("conv", "norm", 1);
        let norm_name = if spec.name.ends_with("downsample.conv") {
            spec.name.replace("downsample.conv", "downsample.norm")
        } else {
            norm_name
        };
        units.push((spec, conv, norm_name, norm));
    }

    let mut conv_units = Vec::with_capacity(units.len());
    for (spec, conv, norm_name, norm) in units {
        let adapter = if lora.adapts(&spec.name) {
            Some(
                LoraAdapter::init(spec.d_out, spec.d_in, spec.kernel, lora.rank, init_rng)?
                    .with_scale(lora.scale)?,
            )
        } else {
            None
        };
        conv_units.push(ConvNorm {
            conv_name: spec.name,
            norm_name,
            conv: AdaptedConv3d::new(conv, adapter)?,
            norm,
        });
    }

    let mut iter = conv_units.into_iter();
    let stem = iter.next().expect("stem conv");
    let mut blocks = Vec::new();
    let mut pending: Vec<ConvNorm<T>> = Vec::new();
    for unit in iter {
        let starts_block = unit.conv_name.ends_with(".conv1");
        if starts_block && !pending.is_empty() {
            blocks.push(assemble_block(std::mem::take(&mut pending)));
        }
        pending.push(unit);
    }
    if !pending.is_empty() {
        blocks.push(assemble_block(pending));
    }

    let mut model = Classifier {
        config: config.clone(),
        stem,
        stem_pool: config.stem.max_pool.then_some(STEM_POOL),
        blocks,
        head: MlpHead::init(config.feature_dim(), head, init_rng)?,
        adapter_path: AdapterPath::Merged,
    };
    if let Some(w) = weights {
        model.load_backbone(w)?;
    }
    Ok(model)
}

fn assemble_block<T>(units: Vec<ConvNorm<T>>) -> Bottleneck<T> {
    let mut it = units.into_iter();
    Bottleneck {
        unit1: it.next().expect("conv1"),
        unit2: it.next().expect("conv2"),
        unit3: it.next().expect("conv3"),
        shortcut: it.next(),
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl<T: Scalar> Classifier<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn set_adapter_path(&mut self, path: AdapterPath) {
        self.adapter_path = path;
    }

    /// Toggle dropout between training and evaluation behaviour.
    pub fn set_training(&mut self, training: bool) {
        self.head.dropout.training = training;
    }

    fn units(&self) -> impl Iterator<Item = &ConvNorm<T>> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| b.units()))
    }

    fn units_mut(&mut self) -> impl Iterator<Item = &mut ConvNorm<T>> {
        std::iter::once(&mut self.stem).chain(self.blocks.iter_mut().flat_map(|b| b.units_mut()))
    }

    /// Number of convolutions and number of attached adapters.
    pub fn conv_and_adapter_counts(&self) -> (usize, usize) {
        let convs = self.units().count();
        let adapters = self.units().filter(|u| u.conv.adapter.is_some()).count();
        (convs, adapters)
    }

    pub fn adapted_convs(&self) -> impl Iterator<Item = (&str, &AdaptedConv3d<T>)> {
        self.units().map(|u| (u.conv_name.as_str(), &u.conv))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "classifier expects [n, {}, D, H, W], got {s:?}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Forward pass. Dropout is active only when `rng` is given and the head
    /// is in training mode.
    pub fn forward_cached(&self, x: &Tensor<T>, rng: Option<&mut RandomSource>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let parallel = self.adapter_path == AdapterPath::Parallel;
        let stem_pre_pool = relu(&self.stem.forward(x, parallel)?);
        let (mut h, pool_argmax) = match &self.stem_pool {
            Some(p) => {
                let (y, arg) = p.forward(&stem_pre_pool)?;
                (y, Some(arg))
            }
            None => (stem_pre_pool.clone(), None),
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, c) = block.forward(&h, parallel)?;
            caches.push(c);
            h = out;
        }
        let features = global_avg_pool(&h)?;
        let (logits, head) = self.head.forward(&features, rng)?;
        Ok((
            logits,
            ForwardCache {
                input: x.clone(),
                stem_pre_pool,
                pool_argmax,
                blocks: caches,
                last_shape: h.shape().to_vec(),
                head,
            },
        ))
    }

    /// Pooled backbone features `[n, feature_dim]`.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let parallel = self.adapter_path == AdapterPath::Parallel;
        let mut h = relu(&self.stem.forward(x, parallel)?);
        if let Some(p) = &self.stem_pool {
            h = p.forward(&h)?.0;
        }
        for block in &self.blocks {
            h = block.forward(&h, parallel)?.0;
        }
        global_avg_pool(&h)
    }

    /// Evaluation-mode logits `[n]`, no dropout.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.features(x)?;
        Ok(self.head.forward(&f, None)?.0)
    }

    /// Evaluation-mode scores in `[0, 1]`: `logistic(logit)`.
    pub fn predict_scores(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        Ok(self.logits(x)?.data().iter().map(|&z| logistic(z.to_f64())).collect())
    }

    /// Gradients of `Σ grad_logits[i]·logit[i]` for every trainable tensor.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads = Gradients::new();
        let g_feat = self.head.backward(&cache.head, grad_logits, &mut grads)?;
        let mut g = global_avg_pool_backward(&g_feat, &cache.last_shape)?;
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = block.backward(c, &g, &mut grads)?;
        }
        if let Some(arg) = &cache.pool_argmax {
            g = MaxPool3d::backward(&g, arg, cache.stem_pre_pool.shape())?;
        }
        let g = relu_backward(&cache.stem_pre_pool, &g)?;
        self.stem.backward(&cache.input, &g, &mut grads)?;
        Ok(grads)
    }

    /// Visit every named tensor with its role, in registry order.
    pub fn visit(&self, mut f: impl FnMut(&str, Role, &Tensor<T>)) {
        for u in self.units() {
            f(&format!("{}.weight", u.conv_name), Role::Frozen, u.conv.frozen.weight());
            if let Some(b) = u.conv.frozen.bias() {
                f(&format!("{}.bias", u.conv_name), Role::Frozen, b);
            }
            if let Some(ad) = &u.conv.adapter {
                f(&format!("{}.lora_a", u.conv_name), Role::Trainable, &ad.a);
                f(&format!("{}.lora_b", u.conv_name), Role::Trainable, &ad.b);
            }
            let n = &u.norm;
            for (k, t) in [
                ("scale", &n.scale),
                ("shift", &n.shift),
                ("running_mean", &n.running_mean),
                ("running_var", &n.running_var),
            ] {
                f(&format!("{}.{k}", u.norm_name), Role::Frozen, t);
            }
        }
        for (layer, lin) in [("fc1", &self.head.fc1), ("fc2", &self.head.fc2)] {
            f(&format!("head.{layer}.weight"), Role::Trainable, &lin.weight);
            f(&format!("head.{layer}.bias"), Role::Trainable, &lin.bias);
        }
    }

    /// Mutable access to trainable tensors only, in registry order.
    pub fn visit_trainable_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for u in self.units_mut() {
            if let Some(ad) = &mut u.conv.adapter {
                f(&format!("{}.lora_a", u.conv_name), &mut ad.a);
                f(&format!("{}.lora_b", u.conv_name), &mut ad.b);
            }
        }
        let head = &mut self.head;
        for (layer, lin) in [("fc1", &mut head.fc1), ("fc2", &mut head.fc2)] {
            f(&format!("head.{layer}.weight"), &mut lin.weight);
            f(&format!("head.{layer}.bias"), &mut lin.bias);
        }
    }

    fn collect(&self, role: Role) -> TensorMap<T> {
        let mut out = TensorMap::new();
        self.visit(|name, r, t| {
            if r == role {
                out.insert(name.to_string(), t.clone());
            }
        });
        out
    }

    /// Adapter factors and head parameters.
    pub fn trainable_tensors(&self) -> TensorMap<T> {
        self.collect(Role::Trainable)
    }

    /// Frozen convolution weights and norm statistics.
    pub fn backbone_tensors(&self) -> TensorMap<T> {
        self.collect(Role::Frozen)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, r, _| {
            if r == Role::Trainable {
                names.push(n.to_string());
            }
        });
        names
    }

    pub fn trainable_param_count(&self) -> ParamCount {
        let mut breakdown = Vec::new();
        for u in self.units() {
            if let Some(ad) = &u.conv.adapter {
                breakdown.push((u.conv_name.clone(), ad.param_count()));
            }
        }
        breakdown.push(("head.fc1".into(), self.head.fc1.param_count()));
        breakdown.push(("head.fc2".into(), self.head.fc2.param_count()));
        ParamCount {
            total: breakdown.iter().map(|(_, n)| n).sum(),
            breakdown,
        }
    }

    /// Overwrite named tensors (any role). Every name must exist in the
    /// registry with identical shape; errors name the first offending tensor.
    pub fn load_tensors(&mut self, table: &TensorMap<T>) -> Result<()> {
        let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        self.visit(|n, _, t| {
            expected.insert(n.to_string(), t.shape().to_vec());
        });
        for (name, t) in table {
            match expected.get(name) {
                None => return Err(Error::Load(format!("tensor {name:?} has no slot in this model"))),
                Some(shape) if shape.as_slice() != t.shape() => {
                    return Err(Error::Load(format!(
                        "tensor {name:?} has shape {:?}, model expects {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        for u in self.units_mut() {
            let conv = &mut u.conv;
            if let Some(w) = table.get(&format!("{}.weight", u.conv_name)) {
                conv.frozen.set_weight(w.clone())?;
            }
            if let Some(b) = table.get(&format!("{}.bias", u.conv_name)) {
                conv.frozen.set_bias(Some(b.clone()))?;
            }
            if let Some(ad) = &mut conv.adapter {
                if let Some(a) = table.get(&format!("{}.lora_a", u.conv_name)) {
                    ad.a = a.clone();
                }
                if let Some(b) = table.get(&format!("{}.lora_b", u.conv_name)) {
                    ad.b = b.clone();
                }
            }
            let n = &mut u.norm;
            for (k, slot) in [
                ("scale", &mut n.scale),
                ("shift", &mut n.shift),
                ("running_mean", &mut n.running_mean),
                ("running_var", &mut n.running_var),
            ] {
                if let Some(t) = table.get(&format!("{}.{k}", u.norm_name)) {
                    *slot = t.clone();
                }
            }
        }
        let head = &mut self.head;
        for (layer, lin) in [("fc1", &mut head.fc1), ("fc2", &mut head.fc2)] {
            if let Some(w) = table.get(&format!("head.{layer}.weight")) {
                lin.weight = w.clone();
            }
            if let Some(b) = table.get(&format!("head.{layer}.bias")) {
                lin.bias = b.clone();
            }
        }
        Ok(())
    }

    /// Load frozen tensors; all of them must be present.
    fn load_backbone(&mut self, table: &TensorMap<T>) -> Result<()> {
        let frozen = self.backbone_tensors();
        if let Some(missing) = frozen.keys().find(|k| !table.contains_key(*k)) {
            return Err(Error::Load(format!("backbone tensor {missing:?} missing from weights")));
        }
        let subset: TensorMap<T> = table
            .iter()
            .filter(|(k, _)| frozen.contains_key(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        self.load_tensors(&subset)
    }

    /// Same backbone and head with every adapter removed.
    pub fn without_adapters(&self) -> Self {
        let mut m = self.clone();
        for u in m.units_mut() {
            u.conv.adapter = None;
        }
        m
    }

    /// Fold every adapter into its frozen kernel and drop the adapter.
    pub fn merge_adapters(&mut self) {
        for u in self.units_mut() {
            if u.conv.adapter.is_some() {
                u.conv = AdaptedConv3d::new(u.conv.merge(), None).expect("plain conv");
            }
        }
    }

    /// Element-type conversion of every tensor.
    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        let cast_unit = |u: &ConvNorm<T>| ConvNorm {
            conv_name: u.conv_name.clone(),
            norm_name: u.norm_name.clone(),
            conv: AdaptedConv3d {
                frozen: Conv3d::new(
                    u.conv.frozen.weight().cast(),
                    u.conv.frozen.bias().map(Tensor::cast),
                    u.conv.frozen.stride(),
                    u.conv.frozen.padding(),
                )
                .expect("same geometry"),
                adapter: u.conv.adapter.as_ref().map(|a| LoraAdapter {
                    a: a.a.cast(),
                    b: a.b.cast(),
                    scale: a.scale,
                }),
            },
            norm: FrozenNorm {
                scale: u.norm.scale.cast(),
                shift: u.norm.shift.cast(),
                running_mean: u.norm.running_mean.cast(),
                running_var: u.norm.running_var.cast(),
                eps: u.norm.eps,
            },
        };
        Classifier {
            config: self.config.clone(),
            stem: cast_unit(&self.stem),
            stem_pool: self.stem_pool,
            blocks: self
                .blocks
                .iter()
                .map(|b| Bottleneck {
                    unit1: cast_unit(&b.unit1),
                    unit2: cast_unit(&b.unit2),
                    unit3: cast_unit(&b.unit3),
                    shortcut: b.shortcut.as_ref().map(cast_unit),
                })
                .collect(),
            head: MlpHead {
                fc1: Linear::new(self.head.fc1.weight.cast(), self.head.fc1.bias.cast()).expect("fc1"),
                dropout: self.head.dropout,
                fc2: Linear::new(self.head.fc2.weight.cast(), self.head.fc2.bias.cast()).expect("fc2"),
            },
            adapter_path: self.adapter_path,
        }
    }
}
