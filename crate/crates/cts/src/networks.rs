//! The condition encoder `h`, the denoising UNet `g`, channel-attention
//! fusion between them, and the consistency function wrapper
//! `f(x, t) = c_skip(t)·x + c_out(t)·g(c_in(t)·x, h(x_d), t)`.
//!
//! Networks are rebuilt from a [`ModelParams`] on every call; building only
//! clones tensor handles, so the same code path serves the online and the
//! target parameter sets.

use std::cell::Cell;

use candle_core::{DType, Device, Tensor};
use cts_core::schedule::boundary_coeffs;
use cts_core::ScheduleConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{conv2d, group_norm_silu, sigmoid, upsample2x};
use crate::params::{Init, ModelParams, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    /// Number of resolution levels; level `i` works at `1/2^i` scale.
    pub depth: usize,
    pub base_channels: usize,
    /// Width multiplier per level, `depth` entries.
    pub channel_mult: Vec<usize>,
    /// Length of the sinusoidal noise-level embedding (even).
    pub time_embed_dim: usize,
    /// Channel-attention bottleneck reduction ratio.
    pub attention_reduction: usize,
    pub norm_groups: usize,
    /// Zero the denoiser's output layer so the untrained model follows the
    /// skip path.
    pub zero_init_output: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 8,
            channel_mult: vec![1, 2, 4, 8],
            time_embed_dim: 32,
            attention_reduction: 4,
            norm_groups: 4,
            zero_init_output: true,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.depth < 2 {
            return bad(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.channel_mult.len() != self.depth {
            return bad(format!(
                "channel_mult has {} entries for depth {}",
                self.channel_mult.len(),
                self.depth
            ));
        }
        if self.base_channels == 0 || self.channel_mult.contains(&0) {
            return bad("channel widths must be >= 1".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim must be even and positive, got {}", self.time_embed_dim));
        }
        if self.attention_reduction == 0 || self.norm_groups == 0 {
            return bad("attention_reduction and norm_groups must be >= 1".into());
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    /// Smallest spatial size divisor accepted by the networks.
    pub fn size_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn groups(&self, channels: usize) -> usize {
        gcd(self.norm_groups, channels)
    }

    fn temb_width(&self) -> usize {
        2 * self.time_embed_dim
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

thread_local! {
    static DENOISER_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of denoiser forward passes run on the current thread.
pub fn denoiser_evaluations() -> u64 {
    DENOISER_EVALS.with(Cell::get)
}

/// Sinusoidal embedding of `ln t`: `dim/2` sines followed by `dim/2` cosines
/// with geometrically spaced frequencies from 4 down to 0.004.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level must be positive, got {t}")));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let x = t.ln();
    let args: Vec<f64> = (0..half)
        .map(|j| {
            let frac = if half == 1 { 0.0 } else { j as f64 / (half - 1) as f64 };
            4.0 * (-(1000f64.ln()) * frac).exp() * x
        })
        .collect();
    Ok(args.iter().map(|a| a.sin()).chain(args.iter().map(|a| a.cos())).collect())
}

struct Conv {
    weight: Tensor,
    bias: Tensor,
}

impl Conv {
    fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, k: usize, zero: bool) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::FanIn(c_in * k * k) };
        Ok(Self {
            weight: pb.get(&[c_out, c_in, k, k], "weight", init)?,
            bias: pb.get(&[c_out], "bias", Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv2d(x, &self.weight, &self.bias)?)
    }
}

struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    fn new(pb: &ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get(&[d_out, d_in], "weight", Init::FanIn(d_in))?,
            bias: pb.get(&[d_out], "bias", Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalization followed by SiLU.
struct Norm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl Norm {
    fn new(pb: &ParamBuilder, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            groups,
            gamma: pb.get(&[channels], "gamma", Init::Ones)?,
            beta: pb.get(&[channels], "beta", Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(group_norm_silu(x, self.groups, &self.gamma, &self.beta)?)
    }
}

/// Pre-activation residual block with an optional noise-level projection.
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time_proj: Option<Linear>,
    norm2: Norm,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl ResBlock {
    fn new(
        pb: &ParamBuilder,
        arch: &ArchitectureConfig,
        c_in: usize,
        c_out: usize,
        temb: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(&pb.push("norm1"), c_in, arch.groups(c_in))?,
            conv1: Conv::new(&pb.push("conv1"), c_in, c_out, 3, false)?,
            time_proj: if temb {
                Some(Linear::new(&pb.push("time_proj"), arch.temb_width(), c_out)?)
            } else {
                None
            },
            norm2: Norm::new(&pb.push("norm2"), c_out, arch.groups(c_out))?,
            conv2: Conv::new(&pb.push("conv2"), c_out, c_out, 3, false)?,
            shortcut: if c_in != c_out {
                Some(Conv::new(&pb.push("shortcut"), c_in, c_out, 1, false)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?)?;
        if let (Some(proj), Some(temb)) = (&self.time_proj, temb) {
            let t = proj.forward(&temb.silu()?)?;
            let c = t.dim(1)?;
            h = h.broadcast_add(&t.reshape((1, c, 1, 1))?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Weights of the channel gate `w = sigmoid(fc2(silu(fc1(pool([u; s])))))`.
pub struct ChannelGate {
    fc1: Linear,
    fc2: Linear,
}

impl ChannelGate {
    fn new(pb: &ParamBuilder, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (2 * channels / reduction).max(1);
        Ok(Self {
            fc1: Linear::new(&pb.push("fc1"), 2 * channels, hidden)?,
            fc2: Linear::new(&pb.push("fc2"), hidden, channels)?,
        })
    }

    /// Binds the gate stored under `prefix` (for example `"denoiser.dec1.gate"`).
    pub fn bind(params: &ModelParams, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        Self::new(&ParamBuilder::bind(params).push(prefix), channels, reduction)
    }

    /// Creates a standalone gate with freshly initialized weights.
    pub fn init(channels: usize, reduction: usize, seed: u64, dtype: DType) -> Result<(Self, ModelParams)> {
        let pb = ParamBuilder::create(seed, dtype);
        let gate = Self::new(&pb, channels, reduction)?;
        Ok((gate, pb.into_params()?))
    }

    /// Per-sample, per-channel weights in `(0, 1)`, shape `(B, C)`.
    pub fn weights(&self, u: &Tensor, s: &Tensor) -> Result<Tensor> {
        check_fuse_shapes(u, s)?;
        let pooled = Tensor::cat(&[u, s], 1)?.mean((2, 3))?;
        Ok(sigmoid(&self.fc2.forward(&self.fc1.forward(&pooled)?.silu()?)?)?)
    }
}

fn check_fuse_shapes(u: &Tensor, s: &Tensor) -> Result<()> {
    if u.dims().len() != 4 || u.dims() != s.dims() {
        return Err(Error::InvalidArgument(format!(
            "fusion needs equal (B, C, H, W) maps, got {:?} and {:?}",
            u.dims(),
            s.dims()
        )));
    }
    Ok(())
}

/// `u + w ⊙ s` with `w` broadcast over the spatial dimensions.
pub fn apply_channel_gate(u: &Tensor, s: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_fuse_shapes(u, s)?;
    let (b, c, _, _) = u.dims4()?;
    if w.dims() != [b, c] {
        return Err(Error::InvalidArgument(format!(
            "gate weights {:?} do not match ({b}, {c})",
            w.dims()
        )));
    }
    Ok((u + s.broadcast_mul(&w.reshape((b, c, 1, 1))?)?)?)
}

/// Overlays the supervision signal `s` on the decoder map `u`, scaled per
/// channel by learned attention weights.
pub fn channel_attention_fuse(u: &Tensor, s: &Tensor, gate: &ChannelGate) -> Result<Tensor> {
    let w = gate.weights(u, s)?;
    apply_channel_gate(u, s, &w)
}

/// Multi-scale supervision signals and the auxiliary mask logits from the
/// condition encoder.
#[derive(Debug, Clone)]
pub struct ConditionFeaturePyramid {
    /// Level `i` has shape `(B, C_i, H/2^i, W/2^i)`.
    pub features: Vec<Tensor>,
    /// `(B, 1, H, W)` logits.
    pub aux_prediction: Tensor,
}

impl ConditionFeaturePyramid {
    /// Same shapes, all features zero (the no-multiscale ablation).
    pub fn zeroed(&self) -> Result<Self> {
        Ok(Self {
            features: self
                .features
                .iter()
                .map(|f| Ok(f.zeros_like()?))
                .collect::<Result<Vec<_>>>()?,
            aux_prediction: self.aux_prediction.clone(),
        })
    }
}

/// Image-to-features UNet; its decoder maps at each scale are the
/// supervision signals.
struct Encoder {
    stem: Conv,
    down: Vec<ResBlock>,
    up_convs: Vec<Conv>,
    up: Vec<ResBlock>,
    head_norm: Norm,
    head: Conv,
}

impl Encoder {
    fn new(pb: &ParamBuilder, arch: &ArchitectureConfig) -> Result<Self> {
        let l = arch.depth;
        let c0 = arch.channels(0);
        let mut down = Vec::with_capacity(l);
        for i in 0..l {
            let c_in = if i == 0 { c0 } else { arch.channels(i - 1) };
            down.push(ResBlock::new(&pb.push(&format!("down{i}")), arch, c_in, arch.channels(i), false)?);
        }
        let mut up_convs = Vec::with_capacity(l - 1);
        let mut up = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            let c = arch.channels(i);
            up_convs.push(Conv::new(&pb.push(&format!("upconv{i}")), arch.channels(i + 1), c, 3, false)?);
            up.push(ResBlock::new(&pb.push(&format!("up{i}")), arch, 2 * c, c, false)?);
        }
        Ok(Self {
            stem: Conv::new(&pb.push("stem"), 1, c0, 3, false)?,
            down,
            up_convs,
            up,
            head_norm: Norm::new(&pb.push("head_norm"), c0, arch.groups(c0))?,
            head: Conv::new(&pb.push("head"), c0, 1, 1, false)?,
        })
    }

    fn forward(&self, x_d: &Tensor) -> Result<ConditionFeaturePyramid> {
        let l = self.down.len();
        let mut skips = Vec::with_capacity(l);
        let mut h = self.stem.forward(x_d)?;
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2d(2)?;
            }
            h = block.forward(&h, None)?;
            skips.push(h.clone());
        }
        let mut features = vec![h.clone(); l];
        for i in (0..l - 1).rev() {
            let u = self.up_convs[i].forward(&upsample2x(&h)?)?;
            h = self.up[i].forward(&Tensor::cat(&[&u, &skips[i]], 1)?, None)?;
            features[i] = h.clone();
        }
        let aux_prediction = self.head.forward(&self.head_norm.forward(&h)?)?;
        Ok(ConditionFeaturePyramid { features, aux_prediction })
    }
}

/// Noise-conditioned UNet over `[x_in; x_d]` with a channel-attention fusion
/// of the matching pyramid level ahead of every decoder block.
struct Denoiser {
    stem: Conv,
    time_fc1: Linear,
    time_fc2: Linear,
    down: Vec<ResBlock>,
    up_convs: Vec<Conv>,
    gates: Vec<ChannelGate>,
    up: Vec<ResBlock>,
    out_norm: Norm,
    out: Conv,
    embed_dim: usize,
}

impl Denoiser {
    fn new(pb: &ParamBuilder, arch: &ArchitectureConfig) -> Result<Self> {
        let l = arch.depth;
        let c0 = arch.channels(0);
        let e = arch.time_embed_dim;
        let mut down = Vec::with_capacity(l);
        for i in 0..l {
            let c_in = if i == 0 { c0 } else { arch.channels(i - 1) };
            down.push(ResBlock::new(&pb.push(&format!("down{i}")), arch, c_in, arch.channels(i), true)?);
        }
        let mut up_convs = Vec::with_capacity(l - 1);
        let mut gates = Vec::with_capacity(l);
        let mut up = Vec::with_capacity(l);
        for i in 0..l {
            let c = arch.channels(i);
            let level = pb.push(&format!("dec{i}"));
            gates.push(ChannelGate::new(&level.push("gate"), c, arch.attention_reduction)?);
            if i + 1 < l {
                up_convs.push(Conv::new(&level.push("upconv"), arch.channels(i + 1), c, 3, false)?);
                up.push(ResBlock::new(&level.push("block"), arch, 2 * c, c, true)?);
            } else {
                up.push(ResBlock::new(&level.push("block"), arch, c, c, true)?);
            }
        }
        Ok(Self {
            stem: Conv::new(&pb.push("stem"), 2, c0, 3, false)?,
            time_fc1: Linear::new(&pb.push("time_fc1"), e, arch.temb_width())?,
            time_fc2: Linear::new(&pb.push("time_fc2"), arch.temb_width(), arch.temb_width())?,
            down,
            up_convs,
            gates,
            up,
            out_norm: Norm::new(&pb.push("out_norm"), c0, arch.groups(c0))?,
            out: Conv::new(&pb.push("out"), c0, 1, 3, arch.zero_init_output)?,
            embed_dim: e,
        })
    }

    fn forward(
        &self,
        x_in: &Tensor,
        x_d: &Tensor,
        pyramid: &ConditionFeaturePyramid,
        t: f64,
    ) -> Result<Tensor> {
        let l = self.down.len();
        let emb = time_embedding(t, self.embed_dim)?;
        let emb = Tensor::from_vec(emb, (1, self.embed_dim), &Device::Cpu)?.to_dtype(x_in.dtype())?;
        let temb = self.time_fc2.forward(&self.time_fc1.forward(&emb)?.silu()?)?;

        let mut skips = Vec::with_capacity(l);
        let mut h = self.stem.forward(&Tensor::cat(&[x_in, x_d], 1)?)?;
        for (i, block) in self.down.iter().enumerate() {
            if i > 0 {
                h = h.avg_pool2d(2)?;
            }
            h = block.forward(&h, Some(&temb))?;
            skips.push(h.clone());
        }
        h = channel_attention_fuse(&h, &pyramid.features[l - 1], &self.gates[l - 1])?;
        h = self.up[l - 1].forward(&h, Some(&temb))?;
        for i in (0..l - 1).rev() {
            let u = self.up_convs[i].forward(&upsample2x(&h)?)?;
            let u = channel_attention_fuse(&u, &pyramid.features[i], &self.gates[i])?;
            h = self.up[i].forward(&Tensor::cat(&[&u, &skips[i]], 1)?, Some(&temb))?;
        }
        Ok(self.out.forward(&self.out_norm.forward(&h)?)?)
    }
}

/// Fresh parameters for encoder and denoiser, deterministic in `seed`.
pub fn init_params(arch: &ArchitectureConfig, seed: u64, dtype: DType) -> Result<ModelParams> {
    arch.validate()?;
    let pb = ParamBuilder::create(seed, dtype);
    Encoder::new(&pb.push("encoder"), arch)?;
    Denoiser::new(&pb.push("denoiser"), arch)?;
    pb.into_params()
}

fn check_input(arch: &ArchitectureConfig, x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x
        .dims4()
        .map_err(|_| Error::InvalidArgument(format!("{what} must be (B, 1, H, W), got {:?}", x.dims())))?;
    if c != 1 {
        return Err(Error::InvalidArgument(format!("{what} must have 1 channel, got {c}")));
    }
    let d = arch.size_divisor();
    if h % d != 0 || w % d != 0 {
        return Err(Error::InvalidArgument(format!(
            "{what} spatial size {h}x{w} is not divisible by {d}"
        )));
    }
    Ok((b, h, w))
}

/// Runs the condition encoder `h` on normalized images `(B, 1, H, W)`.
pub fn encoder_forward(
    params: &ModelParams,
    arch: &ArchitectureConfig,
    x_d: &Tensor,
) -> Result<ConditionFeaturePyramid> {
    check_input(arch, x_d, "image batch")?;
    Encoder::new(&ParamBuilder::bind(params).push("encoder"), arch)?.forward(x_d)
}

fn check_pyramid(arch: &ArchitectureConfig, pyramid: &ConditionFeaturePyramid, b: usize, h: usize, w: usize) -> Result<()> {
    if pyramid.features.len() != arch.depth {
        return Err(Error::InvalidArgument(format!(
            "pyramid has {} levels, expected {}",
            pyramid.features.len(),
            arch.depth
        )));
    }
    for (i, f) in pyramid.features.iter().enumerate() {
        let expected = [b, arch.channels(i), h >> i, w >> i];
        if f.dims() != expected {
            return Err(Error::InvalidArgument(format!(
                "pyramid level {i} has shape {:?}, expected {expected:?}",
                f.dims()
            )));
        }
    }
    Ok(())
}

/// Runs the denoiser `g` on the scaled noisy mask, conditioned on the image,
/// the pyramid and the noise level `t`.
pub fn denoiser_forward(
    params: &ModelParams,
    arch: &ArchitectureConfig,
    x_in: &Tensor,
    x_d: &Tensor,
    pyramid: &ConditionFeaturePyramid,
    t: f64,
) -> Result<Tensor> {
    let (b, h, w) = check_input(arch, x_in, "noisy mask batch")?;
    if x_d.dims() != x_in.dims() {
        return Err(Error::InvalidArgument(format!(
            "image batch {:?} does not match mask batch {:?}",
            x_d.dims(),
            x_in.dims()
        )));
    }
    check_pyramid(arch, pyramid, b, h, w)?;
    let out = Denoiser::new(&ParamBuilder::bind(params).push("denoiser"), arch)?.forward(x_in, x_d, pyramid, t)?;
    DENOISER_EVALS.with(|c| c.set(c.get() + 1));
    Ok(out)
}

/// Output of one consistency-function evaluation.
#[derive(Debug, Clone)]
pub struct ConsistencyOutput {
    /// Estimate of the clean encoded mask, same shape as the noisy input.
    pub y: Tensor,
    /// Encoder mask logits.
    pub aux_logits: Tensor,
}

/// `y = c_skip(t)·x_n + c_out(t)·g(c_in(t)·x_n, x_d, h(x_d), t)`.
///
/// With `multiscale == false` the pyramid reaching the denoiser is zeroed;
/// the auxiliary logits are still produced.
pub fn consistency_forward(
    params: &ModelParams,
    arch: &ArchitectureConfig,
    schedule: &ScheduleConfig,
    x_n: &Tensor,
    x_d: &Tensor,
    t: f64,
    multiscale: bool,
) -> Result<ConsistencyOutput> {
    let coeffs = boundary_coeffs(t, schedule)?;
    let pyramid = encoder_forward(params, arch, x_d)?;
    let fused = if multiscale { pyramid.clone() } else { pyramid.zeroed()? };
    let x_in = (x_n * coeffs.c_in)?;
    let g = denoiser_forward(params, arch, &x_in, x_d, &fused, t)?;
    let y = ((x_n * coeffs.c_skip)? + (g * coeffs.c_out)?)?;
    Ok(ConsistencyOutput {
        y,
        aux_logits: pyramid.aux_prediction,
    })
}

/// Architecture, noise schedule and fusion mode: everything needed to
/// evaluate the consistency function besides the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyModel {
    pub arch: ArchitectureConfig,
    pub schedule: ScheduleConfig,
    pub multiscale: bool,
}

impl ConsistencyModel {
    pub fn forward(&self, params: &ModelParams, x_n: &Tensor, x_d: &Tensor, t: f64) -> Result<ConsistencyOutput> {
        consistency_forward(params, &self.arch, &self.schedule, x_n, x_d, t, self.multiscale)
    }
}
