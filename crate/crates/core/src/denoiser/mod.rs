//! Conditional 2-D U-Net noise predictor.
//!
//! Condition maps enter at the "tap" resolutions, either through
//! spatially-adaptive normalization (both norms of every residual block at
//! that resolution, encoder and decoder side) or by bilinear resizing and
//! channel concatenation at the block input.

mod bypass;
mod spade;

pub use bypass::{make_unconditioned_inputs, FeatureBypass};
pub use spade::{Spade, SPADE_RADIUS};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, tensor_from_f64, Conv2d, GroupNorm, Linear, ParamBuilder};
use crate::pqt::ConditionSet;

/// How condition maps are injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    #[default]
    Spade,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Channel multiple per resolution level; level `i` runs at `H / 2^i`.
    pub channel_mults: Vec<usize>,
    pub blocks_per_level: usize,
    /// Width of the timestep embedding; `None` means `4 * base_channels`.
    pub time_embed_dim: Option<usize>,
    pub norm_groups: usize,
    pub conditioning: ConditioningMode,
    /// Downsampling factor of each condition level (must be powers of two
    /// addressing existing U-Net levels).
    pub tap_factors: Vec<usize>,
    pub spade_hidden: usize,
    pub spade_zero_init: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 64,
            channel_mults: vec![1, 1, 2, 3, 4],
            blocks_per_level: 1,
            time_embed_dim: None,
            norm_groups: 8,
            conditioning: ConditioningMode::Spade,
            tap_factors: vec![4, 8, 16],
            spade_hidden: 64,
            spade_zero_init: true,
        }
    }
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    fn time_dim(&self) -> usize {
        self.time_embed_dim.unwrap_or(4 * self.base_channels)
    }

    /// Index of the condition level feeding U-Net level `i`, if any.
    fn tap_for_level(&self, i: usize) -> Option<usize> {
        self.tap_factors.iter().position(|&f| f == 1 << i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::Config(
                "U-Net channel multiples must be non-empty and >= 1".into(),
            ));
        }
        if self.base_channels == 0 || self.blocks_per_level == 0 || self.norm_groups == 0 {
            return Err(Error::Config(
                "U-Net base channels, blocks and groups must be >= 1".into(),
            ));
        }
        if !self.time_dim().is_multiple_of(2) || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config(
                "timestep embedding widths must be even".into(),
            ));
        }
        for &f in &self.tap_factors {
            if !f.is_power_of_two() || f.trailing_zeros() as usize >= self.levels() {
                return Err(Error::Config(format!(
                    "tap factor {f} does not match any of the {} U-Net levels",
                    self.levels()
                )));
            }
        }
        let mut sorted = self.tap_factors.clone();
        sorted.dedup();
        if sorted.len() != self.tap_factors.len() {
            return Err(Error::Config("duplicate tap factors".into()));
        }
        Ok(())
    }

    /// Input sizes must be divisible by the deepest downsampling factor.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << (self.levels() - 1);
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::Config(format!("input {h}x{w} not divisible by {f}")));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer timesteps: `(b, dim)`.
pub fn timestep_embedding(
    t: &[usize],
    dim: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let freqs =
            (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * step as f64);
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        v.extend(s);
        v.extend(c);
    }
    tensor_from_f64(v, &[t.len(), dim], dtype, device)
}

#[derive(Debug, Clone)]
enum Norm {
    Affine(GroupNorm),
    Spade(Spade),
}

impl Norm {
    fn forward(&self, h: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        match (self, cond) {
            (Norm::Affine(n), _) => n.forward(h),
            (Norm::Spade(s), Some(c)) => s.forward(h, c),
            (Norm::Spade(s), None) => s.plain(h),
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    tap: Option<usize>,
    concat: bool,
    concat_channels: usize,
    norm1: Norm,
    conv1: Conv2d,
    time: Linear,
    norm2: Norm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(
        pb: &mut ParamBuilder<'_>,
        config: &UNetConfig,
        cond_channels: usize,
        in_ch: usize,
        out_ch: usize,
        tap: Option<usize>,
    ) -> Result<Self> {
        let concat = tap.is_some() && config.conditioning == ConditioningMode::Concat;
        let in_total = if concat { in_ch + cond_channels } else { in_ch };
        let spade = tap.is_some() && config.conditioning == ConditioningMode::Spade;
        let g = config.norm_groups;
        let norm = |pb: &mut ParamBuilder<'_>, name: &str, ch: usize| -> Result<Norm> {
            let mut p = pb.push(name);
            Ok(if spade {
                Norm::Spade(Spade::new(
                    &mut p,
                    ch,
                    cond_channels,
                    config.spade_hidden,
                    g,
                    config.spade_zero_init,
                )?)
            } else {
                Norm::Affine(GroupNorm::new(&mut p, ch, g)?)
            })
        };
        let norm1 = norm(pb, "norm1", in_total)?;
        let conv1 = Conv2d::new(&mut pb.push("conv1"), in_total, out_ch, 3, 1, false)?;
        let time = Linear::new(&mut pb.push("time"), config.time_dim(), out_ch, false)?;
        let norm2 = norm(pb, "norm2", out_ch)?;
        let conv2 = Conv2d::new(&mut pb.push("conv2"), out_ch, out_ch, 3, 1, false)?;
        let skip = if in_total != out_ch {
            Some(Conv2d::new(
                &mut pb.push("skip"),
                in_total,
                out_ch,
                1,
                1,
                false,
            )?)
        } else {
            None
        };
        Ok(ResBlock {
            tap,
            concat,
            concat_channels: if concat { cond_channels } else { 0 },
            norm1,
            conv1,
            time,
            norm2,
            conv2,
            skip,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, conds: Option<&ConditionSet>) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let cond =
            match (self.tap, conds) {
                (Some(l), Some(c)) => Some(c.levels.get(l).ok_or_else(|| {
                    Error::Config(format!("condition level {l} missing for a tap"))
                })?),
                _ => None,
            };
        let x = match (self.concat, cond) {
            (true, Some(c)) => Tensor::cat(&[x, &resize_bilinear(c, h, w)?], 1)?,
            (true, None) => {
                let (b, _, _, _) = x.dims4()?;
                let zeros = Tensor::zeros((b, self.concat_channels, h, w), x.dtype(), x.device())?;
                Tensor::cat(&[x, &zeros], 1)?
            }
            _ => x.clone(),
        };
        let spade_cond = if self.concat { None } else { cond };
        let hdn = self
            .conv1
            .forward(&self.norm1.forward(&x, spade_cond)?.silu()?)?;
        let t = self.time.forward(temb)?;
        let (b, c) = t.dims2()?;
        let hdn = hdn.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let hdn = self
            .conv2
            .forward(&self.norm2.forward(&hdn, spade_cond)?.silu()?)?;
        let res = match &self.skip {
            Some(s) => s.forward(&x)?,
            None => x,
        };
        Ok((res + hdn)?)
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResBlock>,
    resample: Option<Conv2d>,
}

/// The conditional U-Net.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    cond_channels: usize,
    time1: Linear,
    time2: Linear,
    input: Conv2d,
    down: Vec<Level>,
    mid: ResBlock,
    up: Vec<Level>,
    out_norm: GroupNorm,
    output: Conv2d,
}

impl UNet {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        config: &UNetConfig,
        cond_channels: usize,
    ) -> Result<Self> {
        config.validate()?;
        let base = config.base_channels;
        let chans: Vec<usize> = config.channel_mults.iter().map(|m| m * base).collect();
        let n = chans.len();
        let time1 = Linear::new(&mut pb.push("time1"), base, config.time_dim(), false)?;
        let time2 = Linear::new(
            &mut pb.push("time2"),
            config.time_dim(),
            config.time_dim(),
            false,
        )?;
        let input = Conv2d::new(&mut pb.push("input"), 1, chans[0], 3, 1, false)?;

        let mut down = Vec::with_capacity(n);
        let mut prev = chans[0];
        for (i, &c) in chans.iter().enumerate() {
            let mut lp = pb.push(format!("down{i}"));
            let tap = config.tap_for_level(i);
            let mut blocks = Vec::new();
            for j in 0..config.blocks_per_level {
                blocks.push(ResBlock::new(
                    &mut lp.push(format!("block{j}")),
                    config,
                    cond_channels,
                    prev,
                    c,
                    tap,
                )?);
                prev = c;
            }
            let resample = if i + 1 < n {
                Some(Conv2d::new(&mut lp.push("downsample"), c, c, 3, 2, false)?)
            } else {
                None
            };
            down.push(Level { blocks, resample });
        }
        let mid = ResBlock::new(
            &mut pb.push("mid"),
            config,
            cond_channels,
            prev,
            prev,
            config.tap_for_level(n - 1),
        )?;

        let mut up = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let c = chans[i];
            let mut lp = pb.push(format!("up{i}"));
            let tap = config.tap_for_level(i);
            let mut blocks = Vec::new();
            for j in 0..config.blocks_per_level {
                let in_ch = if j == 0 { prev + c } else { c };
                blocks.push(ResBlock::new(
                    &mut lp.push(format!("block{j}")),
                    config,
                    cond_channels,
                    in_ch,
                    c,
                    tap,
                )?);
                prev = c;
            }
            let resample = if i > 0 {
                Some(Conv2d::new(&mut lp.push("upsample"), c, c, 3, 1, false)?)
            } else {
                None
            };
            up.push(Level { blocks, resample });
        }
        let out_norm = GroupNorm::new(&mut pb.push("out_norm"), chans[0], config.norm_groups)?;
        let output = Conv2d::new(&mut pb.push("output"), chans[0], 1, 3, 1, false)?;
        Ok(UNet {
            config: config.clone(),
            cond_channels,
            time1,
            time2,
            input,
            down,
            mid,
            up,
            out_norm,
            output,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_channels
    }

    fn check_conditions(
        &self,
        conds: &ConditionSet,
        h: usize,
        w: usize,
        batch: usize,
    ) -> Result<()> {
        for (l, &f) in self.config.tap_factors.iter().enumerate() {
            let map = conds.levels.get(l).ok_or_else(|| {
                Error::Config(format!("missing condition level {l} for the /{f} tap"))
            })?;
            let (b, c, mh, mw) = map.dims4()?;
            if b != batch || c != self.cond_channels {
                return Err(Error::Shape(format!(
                    "condition level {l} is {:?}, expected batch {batch} with {} channels",
                    map.dims(),
                    self.cond_channels
                )));
            }
            if self.config.conditioning == ConditioningMode::Spade && (mh, mw) != (h / f, w / f) {
                return Err(Error::Shape(format!(
                    "condition level {l} is {mh}x{mw} but the /{f} tap runs at {}x{}",
                    h / f,
                    w / f
                )));
            }
        }
        Ok(())
    }

    /// Predicts the noise in `x_t` (`(b, 1, H, W)`) at timesteps `t`.
    pub fn predict_noise(&self, x_t: &Tensor, t: &[usize], conds: &ConditionSet) -> Result<Tensor> {
        let (b, _, h, w) = x_t.dims4()?;
        self.check_conditions(conds, h, w, b)?;
        self.forward(x_t, t, Some(conds))
    }

    /// The same network with every conditioning path removed: tap norms
    /// become bare group normalization and concatenated maps are zeros.
    pub fn predict_noise_unconditioned(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.forward(x_t, t, None)
    }

    fn forward(&self, x_t: &Tensor, t: &[usize], conds: Option<&ConditionSet>) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("expected one input channel, got {c}")));
        }
        if t.len() != b {
            return Err(Error::Shape(format!(
                "{} timesteps for a batch of {b}",
                t.len()
            )));
        }
        self.config.check_input(h, w)?;
        let temb = timestep_embedding(t, self.config.base_channels, x_t.dtype(), x_t.device())?;
        let temb = self
            .time2
            .forward(&self.time1.forward(&temb)?.silu()?)?
            .silu()?;

        let mut x = self.input.forward(x_t)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            for block in &level.blocks {
                x = block.forward(&x, &temb, conds)?;
            }
            skips.push(x.clone());
            if let Some(down) = &level.resample {
                x = down.forward(&x)?;
            }
        }
        x = self.mid.forward(&x, &temb, conds)?;
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            x = Tensor::cat(&[&x, &skip], 1)?;
            for block in &level.blocks {
                x = block.forward(&x, &temb, conds)?;
            }
            if let Some(up) = &level.resample {
                let (_, _, lh, lw) = x.dims4()?;
                x = up.forward(&x.upsample_nearest2d(lh * 2, lw * 2)?)?;
            }
        }
        self.output.forward(&self.out_norm.forward(&x)?.silu()?)
    }
}
