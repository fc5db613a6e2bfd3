//! Convolutional embedding trunks: a VGG-M preset and ResNet-34/50 adapted
//! to 512-bin spectrogram input.
//!
//! Every trunk ends with a frequency-support convolution (`fc1`, a 9x1
//! kernel applied without padding) followed by an average pool over all
//! remaining frequency positions and time frames, so any input length maps
//! to one vector. A linear head on that vector produces either
//! classification logits or an embedding.
//!
//! The VGG-M layer stack before `fc6` is a reconstruction of the
//! published VoxCeleb1 baseline, not something this crate can verify.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;
use vexkit_ndgrad::{BnMode, BnStats, NdError, ParamSet, PoolGeom, Tape, Tensor, Var};

use crate::frontend::{Spectrogram, FREQ_BINS};
use crate::rng::fnv1a;

/// Running-statistics update rate of every batchnorm layer.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum TrunkError {
    #[error("invalid trunk config: {0}")]
    Config(String),
    #[error("input has {frames} frames, the trunk needs at least {min}")]
    InputTooShort { frames: usize, min: usize },
    #[error("input has {0} frequency rows, expected {FREQ_BINS}")]
    FreqBins(usize),
    #[error("head mismatch: expected {expected}, found {found}")]
    HeadMismatch { expected: HeadKind, found: HeadKind },
    #[error(transparent)]
    Nd(#[from] NdError),
}

pub type Result<T> = std::result::Result<T, TrunkError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Vggm,
    Resnet34,
    Resnet50,
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vggm" => Ok(Self::Vggm),
            "resnet34" => Ok(Self::Resnet34),
            "resnet50" => Ok(Self::Resnet50),
            other => Err(format!("unknown trunk family `{other}`")),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vggm => "vggm",
            Self::Resnet34 => "resnet34",
            Self::Resnet50 => "resnet50",
        })
    }
}

/// Channel-count scale factor `numer / denom`, at most 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WidthMultiplier {
    numer: u32,
    denom: u32,
}

impl WidthMultiplier {
    pub const FULL: Self = Self { numer: 1, denom: 1 };

    pub fn new(numer: u32, denom: u32) -> std::result::Result<Self, String> {
        if numer == 0 || denom == 0 || numer > denom {
            return Err(format!("width multiplier {numer}/{denom} outside (0, 1]"));
        }
        Ok(Self { numer, denom })
    }

    pub fn scale(&self, channels: usize) -> usize {
        (channels * self.numer as usize / self.denom as usize).max(1)
    }
}

impl FromStr for WidthMultiplier {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("bad width multiplier `{s}`");
        match s.split_once('/') {
            Some((n, d)) => Self::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => Self::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numer, self.denom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrunkConfig {
    pub family: Family,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub width: WidthMultiplier,
    pub input_freq_bins: usize,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            family: Family::Resnet34,
            num_classes: 5994,
            embed_dim: 512,
            width: WidthMultiplier::FULL,
            input_freq_bins: FREQ_BINS,
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_classes == 0 {
            return Err(TrunkError::Config("embed_dim and num_classes must be positive".into()));
        }
        if self.input_freq_bins != FREQ_BINS {
            return Err(TrunkError::Config(format!(
                "input_freq_bins must be {FREQ_BINS}, got {}",
                self.input_freq_bins
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Classification,
    Embedding,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Classification => "classification",
            Self::Embedding => "embedding",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvSpec {
    name: String,
    in_ch: usize,
    out_ch: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
}

impl ConvSpec {
    fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, k: (usize, usize), s: (usize, usize), p: (usize, usize)) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel: k,
            stride: s,
            pad: p,
        }
    }

    /// Square kernel with floor "same" padding.
    fn same(name: impl Into<String>, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        Self::new(name, in_ch, out_ch, (k, k), (stride, stride), (k / 2, k / 2))
    }

    fn out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        PoolGeom::new(self.kernel, self.stride, self.pad).out_dims(h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    /// conv, batchnorm, ReLU
    Conv(ConvSpec),
    MaxPool(PoolGeom),
    Basic {
        a: ConvSpec,
        b: ConvSpec,
        project: Option<ConvSpec>,
    },
    Bottleneck {
        a: ConvSpec,
        b: ConvSpec,
        c: ConvSpec,
        project: Option<ConvSpec>,
    },
}

/// A layer's trainable parameter count.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub layer: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub layers: Vec<LayerParams>,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.count).sum()
    }

    pub fn get(&self, layer: &str) -> Option<usize> {
        self.layers.iter().find(|l| l.layer == layer).map(|l| l.count)
    }

    /// Trainable parameters of a batchnormed convolution with the given shape.
    pub fn conv_bn_count(kernel: (usize, usize), in_ch: usize, out_ch: usize) -> usize {
        kernel.0 * kernel.1 * in_ch * out_ch + 2 * out_ch
    }
}

/// Residual-stage layout of one family.
#[derive(Clone, Debug, PartialEq)]
pub struct StageInfo {
    pub blocks: usize,
    pub width: usize,
    pub out_channels: usize,
}

/// An embedding network: layer stack, frequency fc, temporal pool and head.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    config: TrunkConfig,
    layers: Vec<Layer>,
    fc1: ConvSpec,
    /// VGG-M keeps a dense layer between the pool and the head.
    post_pool: Option<(usize, usize)>,
    head: HeadKind,
    stages: Vec<StageInfo>,
}

/// Per-batchnorm statistics to fold into the running averages.
pub type BnUpdates = Vec<(String, BnStats)>;

pub struct ForwardVars {
    pub frame_features: Var,
    pub pooled: Var,
    pub output: Var,
    pub bn_updates: BnUpdates,
}

/// Tensors produced by one evaluation-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TrunkOutput {
    /// `[N, channels, freq positions, time positions]` before pooling.
    pub frame_features: Tensor,
    pub pooled: Tensor,
    pub embedding: Option<Tensor>,
    pub logits: Option<Tensor>,
}

fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn add_conv_bn<R: Rng + ?Sized>(params: &mut ParamSet, spec: &ConvSpec, rng: &mut R) -> Result<()> {
    let fan_in = spec.in_ch * spec.kernel.0 * spec.kernel.1;
    let shape = [spec.out_ch, spec.in_ch, spec.kernel.0, spec.kernel.1];
    params.insert(format!("{}/w", spec.name), kaiming(&shape, fan_in, rng), true)?;
    add_bn(params, &spec.name, spec.out_ch)
}

fn add_bn(params: &mut ParamSet, name: &str, ch: usize) -> Result<()> {
    params.insert(format!("{name}/bn/gamma"), Tensor::full(&[ch], 1.0), true)?;
    params.insert(format!("{name}/bn/beta"), Tensor::zeros(&[ch]), true)?;
    params.insert(format!("{name}/bn/running_mean"), Tensor::zeros(&[ch]), false)?;
    params.insert(format!("{name}/bn/running_var"), Tensor::full(&[ch], 1.0), false)?;
    Ok(())
}

/// Builds the trunk described by `config` with freshly initialized
/// parameters and a classification head.
pub fn build_trunk<R: Rng + ?Sized>(config: &TrunkConfig, rng: &mut R) -> Result<(Trunk, ParamSet, ParamReport)> {
    config.validate()?;
    let trunk = Trunk::layout(config.clone());
    let mut params = ParamSet::new();
    let mut report = Vec::new();
    let mut record = |name: &str, before: usize, params: &ParamSet| {
        let count = params
            .iter()
            .skip(before)
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.len())
            .sum();
        report.push(LayerParams {
            layer: name.to_string(),
            count,
        });
    };
    for layer in &trunk.layers {
        let before = params.len();
        let name = match layer {
            Layer::Conv(c) => {
                add_conv_bn(&mut params, c, rng)?;
                c.name.clone()
            }
            Layer::MaxPool(_) => continue,
            Layer::Basic { a, b, project } => {
                for c in [Some(a), Some(b), project.as_ref()].into_iter().flatten() {
                    add_conv_bn(&mut params, c, rng)?;
                }
                a.name.trim_end_matches("/a").to_string()
            }
            Layer::Bottleneck { a, b, c, project } => {
                for s in [Some(a), Some(b), Some(c), project.as_ref()].into_iter().flatten() {
                    add_conv_bn(&mut params, s, rng)?;
                }
                a.name.trim_end_matches("/a").to_string()
            }
        };
        record(&name, before, &params);
    }
    let before = params.len();
    add_conv_bn(&mut params, &trunk.fc1, rng)?;
    record(&trunk.fc1.name, before, &params);
    if let Some((din, dout)) = trunk.post_pool {
        let before = params.len();
        params.insert("fc7/w", kaiming(&[dout, din], din, rng), true)?;
        add_bn(&mut params, "fc7", dout)?;
        record("fc7", before, &params);
    }
    let before = params.len();
    trunk.init_head(&mut params, HeadKind::Classification, rng)?;
    record("head", before, &params);
    Ok((trunk, params, ParamReport { layers: report }))
}

impl Trunk {
    fn layout(config: TrunkConfig) -> Self {
        let w = |c: usize| config.width.scale(c);
        let mut layers = Vec::new();
        let mut stages = Vec::new();
        let (fc1, post_pool) = match config.family {
            Family::Vggm => {
                layers.push(Layer::Conv(ConvSpec::same("conv1", 1, w(96), 7, 2)));
                layers.push(Layer::MaxPool(PoolGeom::new((3, 3), (2, 2), (0, 0))));
                layers.push(Layer::Conv(ConvSpec::same("conv2", w(96), w(256), 5, 2)));
                layers.push(Layer::MaxPool(PoolGeom::new((3, 3), (2, 2), (0, 0))));
                layers.push(Layer::Conv(ConvSpec::same("conv3", w(256), w(384), 3, 1)));
                layers.push(Layer::Conv(ConvSpec::same("conv4", w(384), w(256), 3, 1)));
                layers.push(Layer::Conv(ConvSpec::same("conv5", w(256), w(256), 3, 1)));
                layers.push(Layer::MaxPool(PoolGeom::new((5, 3), (3, 2), (0, 0))));
                let fc6 = ConvSpec::new("fc6", w(256), w(4096), (9, 1), (1, 1), (0, 0));
                (fc6, Some((w(4096), w(1024))))
            }
            Family::Resnet34 | Family::Resnet50 => {
                layers.push(Layer::Conv(ConvSpec::same("conv1", 1, w(64), 7, 2)));
                layers.push(Layer::MaxPool(PoolGeom::new((3, 3), (2, 2), (1, 1))));
                let bottleneck = config.family == Family::Resnet50;
                let expansion = if bottleneck { 4 } else { 1 };
                let mut in_ch = w(64);
                for (stage, (blocks, width)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
                    let mid = w(width);
                    let out = w(width * expansion);
                    for block in 0..blocks {
                        let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                        let name = format!("conv{}_{}", stage + 2, block + 1);
                        let project = (stride != 1 || in_ch != out)
                            .then(|| ConvSpec::new(format!("{name}/proj"), in_ch, out, (1, 1), (stride, stride), (0, 0)));
                        layers.push(if bottleneck {
                            Layer::Bottleneck {
                                a: ConvSpec::same(format!("{name}/a"), in_ch, mid, 1, 1),
                                b: ConvSpec::same(format!("{name}/b"), mid, mid, 3, stride),
                                c: ConvSpec::same(format!("{name}/c"), mid, out, 1, 1),
                                project,
                            }
                        } else {
                            Layer::Basic {
                                a: ConvSpec::same(format!("{name}/a"), in_ch, out, 3, stride),
                                b: ConvSpec::same(format!("{name}/b"), out, out, 3, 1),
                                project,
                            }
                        });
                        in_ch = out;
                    }
                    stages.push(StageInfo {
                        blocks,
                        width: mid,
                        out_channels: out,
                    });
                }
                let fc1_out = if bottleneck { w(2048) } else { w(512) };
                (ConvSpec::new("fc1", in_ch, fc1_out, (9, 1), (1, 1), (0, 0)), None)
            }
        };
        Self {
            config,
            layers,
            fc1,
            post_pool,
            head: HeadKind::Classification,
            stages,
        }
    }

    pub fn config(&self) -> &TrunkConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    /// Residual stages (empty for VGG-M).
    pub fn stages(&self) -> &[StageInfo] {
        &self.stages
    }

    /// Output channels of the frequency fc layer.
    pub fn fc1_channels(&self) -> usize {
        self.fc1.out_ch
    }

    /// Trainable parameters a fully connected replacement of the frequency
    /// fc would need if its kernel also spanned every time position left at
    /// `frames` input frames.
    pub fn dense_fc_baseline(&self, frames: usize) -> Option<usize> {
        let (_, w) = self.pre_fc1_dims(self.config.input_freq_bins, frames)?;
        Some(ParamReport::conv_bn_count(
            (self.fc1.kernel.0, w),
            self.fc1.in_ch,
            self.fc1.out_ch,
        ))
    }

    /// Name of the frequency fc layer (`fc6` for VGG-M, `fc1` otherwise).
    pub fn fc_layer_name(&self) -> &str {
        &self.fc1.name
    }

    /// Dimension of the pooled vector fed to the head.
    pub fn feature_dim(&self) -> usize {
        self.post_pool.map_or(self.fc1.out_ch, |(_, d)| d)
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::Classification => self.config.num_classes,
            HeadKind::Embedding => self.config.embed_dim,
        }
    }

    /// Stable hash of the architecture and current head, stored in
    /// checkpoints so mismatched loads are refused.
    pub fn fingerprint(&self) -> u64 {
        let c = &self.config;
        fnv1a(
            format!(
                "{}|{}|{}|{}|{}|{}",
                c.family, c.num_classes, c.embed_dim, c.width, c.input_freq_bins, self.head
            )
            .as_bytes(),
        )
    }

    fn init_head<R: Rng + ?Sized>(&self, params: &mut ParamSet, kind: HeadKind, rng: &mut R) -> Result<()> {
        let din = self.feature_dim();
        let dout = match kind {
            HeadKind::Classification => self.config.num_classes,
            HeadKind::Embedding => self.config.embed_dim,
        };
        params.insert("head/w", kaiming(&[dout, din], din, rng), true)?;
        params.insert("head/b", Tensor::zeros(&[dout]), true)?;
        Ok(())
    }

    /// Replaces the `from` head with a freshly initialized `to` head,
    /// leaving every trunk parameter untouched.
    pub fn swap_head<R: Rng + ?Sized>(&mut self, params: &mut ParamSet, from: HeadKind, to: HeadKind, rng: &mut R) -> Result<()> {
        if self.head != from {
            return Err(TrunkError::HeadMismatch {
                expected: from,
                found: self.head,
            });
        }
        params.remove_prefix("head/");
        self.init_head(params, to, rng)?;
        self.head = to;
        Ok(())
    }

    /// Marks the head kind without touching parameters (used when loading
    /// a checkpoint whose head is already in `params`).
    pub fn set_head(&mut self, head: HeadKind) {
        self.head = head;
    }

    /// Spatial dims `(freq, time)` reaching `fc1`'s output, or `None` if
    /// some layer's window does not fit.
    pub fn frame_dims(&self, freq: usize, frames: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (freq, frames);
        for layer in &self.layers {
            (h, w) = match layer {
                Layer::Conv(c) => c.out_dims(h, w)?,
                Layer::MaxPool(g) => g.out_dims(h, w)?,
                Layer::Basic { a, b, .. } => {
                    let (h1, w1) = a.out_dims(h, w)?;
                    b.out_dims(h1, w1)?
                }
                Layer::Bottleneck { a, b, c, .. } => {
                    let d = a.out_dims(h, w)?;
                    let d = b.out_dims(d.0, d.1)?;
                    c.out_dims(d.0, d.1)?
                }
            };
        }
        self.fc1.out_dims(h, w)
    }

    /// Spatial dims at the input of `fc1`.
    pub fn pre_fc1_dims(&self, freq: usize, frames: usize) -> Option<(usize, usize)> {
        let (h, w) = self.frame_dims(freq, frames)?;
        Some((h + self.fc1.kernel.0 - 1, w + self.fc1.kernel.1 - 1))
    }

    /// Shortest input (in frames) the layer stack accepts.
    pub fn min_frames(&self) -> usize {
        (1..4096)
            .find(|&t| self.frame_dims(self.config.input_freq_bins, t).is_some())
            .expect("trunk accepts some input length")
    }

    fn conv_bn_relu(
        &self,
        params: &ParamSet,
        tape: &mut Tape,
        x: Var,
        spec: &ConvSpec,
        mode: Mode,
        relu: bool,
        updates: &mut BnUpdates,
    ) -> Result<Var> {
        let w = tape.param(params, &format!("{}/w", spec.name))?;
        let y = tape.conv2d(x, w, None, spec.stride, spec.pad)?;
        let y = self.bn(params, tape, y, &spec.name, mode, updates)?;
        Ok(if relu { tape.relu(y) } else { y })
    }

    fn bn(&self, params: &ParamSet, tape: &mut Tape, x: Var, name: &str, mode: Mode, updates: &mut BnUpdates) -> Result<Var> {
        let gamma = tape.param(params, &format!("{name}/bn/gamma"))?;
        let beta = tape.param(params, &format!("{name}/bn/beta"))?;
        let (y, stats) = match mode {
            Mode::Train => tape.batchnorm(x, gamma, beta, BnMode::Train)?,
            Mode::Eval => {
                let mean = params.value(&format!("{name}/bn/running_mean"))?.data();
                let var = params.value(&format!("{name}/bn/running_var"))?.data();
                tape.batchnorm(x, gamma, beta, BnMode::Eval { mean, var })?
            }
        };
        if let Some(stats) = stats {
            updates.push((name.to_string(), stats));
        }
        Ok(y)
    }

    /// Layer stack and `fc1` on a `[N, 1, 512, T]` input.
    pub fn forward_frames(&self, params: &ParamSet, tape: &mut Tape, input: Var, mode: Mode, updates: &mut BnUpdates) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        let (freq, frames) = match shape.as_slice() {
            [_, 1, f, t] => (*f, *t),
            _ => {
                return Err(TrunkError::Nd(NdError::Shape {
                    op: "trunk",
                    detail: format!("expected [N, 1, 512, T], got {shape:?}"),
                }))
            }
        };
        if freq != self.config.input_freq_bins {
            return Err(TrunkError::FreqBins(freq));
        }
        if self.frame_dims(freq, frames).is_none() {
            return Err(TrunkError::InputTooShort {
                frames,
                min: self.min_frames(),
            });
        }
        let mut x = input;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(c) => self.conv_bn_relu(params, tape, x, c, mode, true, updates)?,
                Layer::MaxPool(g) => tape.maxpool2d(x, *g)?,
                Layer::Basic { a, b, project } => {
                    let h = self.conv_bn_relu(params, tape, x, a, mode, true, updates)?;
                    let h = self.conv_bn_relu(params, tape, h, b, mode, false, updates)?;
                    let skip = match project {
                        Some(p) => self.conv_bn_relu(params, tape, x, p, mode, false, updates)?,
                        None => x,
                    };
                    let sum = tape.add(h, skip)?;
                    tape.relu(sum)
                }
                Layer::Bottleneck { a, b, c, project } => {
                    let h = self.conv_bn_relu(params, tape, x, a, mode, true, updates)?;
                    let h = self.conv_bn_relu(params, tape, h, b, mode, true, updates)?;
                    let h = self.conv_bn_relu(params, tape, h, c, mode, false, updates)?;
                    let skip = match project {
                        Some(p) => self.conv_bn_relu(params, tape, x, p, mode, false, updates)?,
                        None => x,
                    };
                    let sum = tape.add(h, skip)?;
                    tape.relu(sum)
                }
            };
        }
        self.conv_bn_relu(params, tape, x, &self.fc1, mode, true, updates)
    }

    /// Temporal pool and head on frame features `[N, C, F, T]`.
    ///
    /// Returns `(pooled, head output)`.
    pub fn forward_from_frames(&self, params: &ParamSet, tape: &mut Tape, frames: Var, mode: Mode, updates: &mut BnUpdates) -> Result<(Var, Var)> {
        let shape = tape.value(frames).shape().to_vec();
        let (n, c, f, t) = (shape[0], shape[1], shape[2], shape[3]);
        let pooled = tape.avgpool2d(frames, (f, t), (1, 1))?;
        let mut pooled = tape.reshape(pooled, &[n, c])?;
        if self.post_pool.is_some() {
            let w = tape.param(params, "fc7/w")?;
            let h = tape.linear(pooled, w, None)?;
            let h = self.bn(params, tape, h, "fc7", mode, updates)?;
            pooled = tape.relu(h);
        }
        let w = tape.param(params, "head/w")?;
        let b = tape.param(params, "head/b")?;
        let out = tape.linear(pooled, w, Some(b))?;
        Ok((pooled, out))
    }

    pub fn forward(&self, params: &ParamSet, tape: &mut Tape, input: Var, mode: Mode) -> Result<ForwardVars> {
        let mut bn_updates = Vec::new();
        let frame_features = self.forward_frames(params, tape, input, mode, &mut bn_updates)?;
        let (pooled, output) = self.forward_from_frames(params, tape, frame_features, mode, &mut bn_updates)?;
        Ok(ForwardVars {
            frame_features,
            pooled,
            output,
            bn_updates,
        })
    }

    /// Evaluation-mode pass over a `[N, 1, 512, T]` batch.
    pub fn infer(&self, params: &ParamSet, input: Tensor) -> Result<TrunkOutput> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let vars = self.forward(params, &mut tape, x, Mode::Eval)?;
        let output = tape.value(vars.output).clone();
        let (embedding, logits) = match self.head {
            HeadKind::Embedding => (Some(output), None),
            HeadKind::Classification => (None, Some(output)),
        };
        Ok(TrunkOutput {
            frame_features: tape.value(vars.frame_features).clone(),
            pooled: tape.value(vars.pooled).clone(),
            embedding,
            logits,
        })
    }

    /// Head output for frame features supplied directly (evaluation mode).
    pub fn infer_from_frames(&self, params: &ParamSet, frames: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(frames);
        let (_, out) = self.forward_from_frames(params, &mut tape, x, Mode::Eval, &mut Vec::new())?;
        Ok(tape.value(out).clone())
    }
}

/// Folds batch statistics into running averages with [`BN_MOMENTUM`].
pub fn apply_bn_updates(params: &mut ParamSet, updates: &BnUpdates, f32_storage: bool) -> Result<()> {
    for (name, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let p = params.get_mut(&format!("{name}/bn/{suffix}"))?;
            for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                if f32_storage {
                    *r = *r as f32 as f64;
                }
            }
        }
    }
    Ok(())
}

/// Stacks equal-length spectrograms into a `[N, 1, 512, T]` batch.
pub fn batch_tensor(specs: &[&Spectrogram]) -> Result<Tensor> {
    let frames = specs.first().map(|s| s.frames()).unwrap_or(0);
    if specs.is_empty() || specs.iter().any(|s| s.frames() != frames) {
        return Err(TrunkError::Config("batch needs equal-length spectrograms".into()));
    }
    let mut data = Vec::with_capacity(specs.len() * FREQ_BINS * frames);
    for s in specs {
        data.extend_from_slice(s.values());
    }
    Ok(Tensor::new(vec![specs.len(), 1, FREQ_BINS, frames], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(family: Family, width: &str) -> TrunkConfig {
        TrunkConfig {
            family,
            num_classes: 7,
            embed_dim: 16,
            width: width.parse().unwrap(),
            ..TrunkConfig::default()
        }
    }

    #[test]
    fn width_parsing() {
        assert_eq!("1/8".parse::<WidthMultiplier>().unwrap().scale(64), 8);
        assert_eq!("1".parse::<WidthMultiplier>().unwrap().scale(64), 64);
        assert!("2/1".parse::<WidthMultiplier>().is_err());
        assert!("0/3".parse::<WidthMultiplier>().is_err());
        assert!("x".parse::<WidthMultiplier>().is_err());
    }

    #[test]
    fn resnet34_geometry() {
        let t = Trunk::layout(TrunkConfig::default());
        let blocks: Vec<usize> = t.stages().iter().map(|s| s.blocks).collect();
        assert_eq!(blocks, vec![3, 4, 6, 3]);
        let widths: Vec<usize> = t.stages().iter().map(|s| s.out_channels).collect();
        assert_eq!(widths, vec![64, 128, 256, 512]);
        assert_eq!(t.fc1_channels(), 512);
        assert_eq!(t.pre_fc1_dims(512, 300), Some((16, 10)));
        assert_eq!(t.frame_dims(512, 300), Some((8, 10)));
        assert_eq!(t.min_frames(), 1);
    }

    #[test]
    fn resnet50_geometry() {
        let t = Trunk::layout(TrunkConfig {
            family: Family::Resnet50,
            ..TrunkConfig::default()
        });
        let widths: Vec<(usize, usize)> = t.stages().iter().map(|s| (s.width, s.out_channels)).collect();
        assert_eq!(widths, vec![(64, 256), (128, 512), (256, 1024), (512, 2048)]);
        assert_eq!(t.fc1_channels(), 2048);
        assert_eq!(t.pre_fc1_dims(512, 300), Some((16, 10)));
    }

    #[test]
    fn vggm_pools_over_eight_frames() {
        let t = Trunk::layout(TrunkConfig {
            family: Family::Vggm,
            ..TrunkConfig::default()
        });
        assert_eq!(t.frame_dims(512, 300), Some((1, 8)));
        assert!(t.min_frames() > 1);
        assert!(t.frame_dims(512, t.min_frames() - 1).is_none());
    }

    #[test]
    fn width_scaling_keeps_blocks() {
        let full = Trunk::layout(TrunkConfig::default());
        let eighth = Trunk::layout(cfg(Family::Resnet34, "1/8"));
        for (a, b) in full.stages().iter().zip(eighth.stages()) {
            assert_eq!(a.blocks, b.blocks);
            assert_eq!(a.out_channels / 8, b.out_channels);
        }
        assert_eq!(eighth.fc1_channels(), 64);
    }

    #[test]
    fn head_swap_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut t, mut p, _) = build_trunk(&cfg(Family::Resnet34, "1/32"), &mut rng).unwrap();
        let before = p.clone();
        assert!(matches!(
            t.swap_head(&mut p, HeadKind::Embedding, HeadKind::Classification, &mut rng),
            Err(TrunkError::HeadMismatch { .. })
        ));
        t.swap_head(&mut p, HeadKind::Classification, HeadKind::Embedding, &mut rng)
            .unwrap();
        assert_eq!(p.value("head/w").unwrap().shape(), &[16, t.feature_dim()]);
        for (name, param) in before.iter().filter(|(n, _)| !n.starts_with("head/")) {
            let after = &p.get(name).unwrap().value;
            assert!(param.value.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let fp = t.fingerprint();
        t.swap_head(&mut p, HeadKind::Embedding, HeadKind::Classification, &mut rng)
            .unwrap();
        assert_ne!(fp, t.fingerprint());
        assert_eq!(t.output_dim(), 7);
    }

    #[test]
    fn bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, p, _) = build_trunk(&cfg(Family::Vggm, "1/32"), &mut rng).unwrap();
        let short = Tensor::zeros(&[1, 1, 512, 5]);
        assert!(matches!(t.infer(&p, short), Err(TrunkError::InputTooShort { frames: 5, .. })));
        let wrong = Tensor::zeros(&[1, 1, 256, 300]);
        assert!(matches!(t.infer(&p, wrong), Err(TrunkError::FreqBins(256))));
        let bad = TrunkConfig {
            embed_dim: 0,
            ..TrunkConfig::default()
        };
        assert!(build_trunk(&bad, &mut rng).is_err());
    }
}
