//! Multi-scale X-ray feature extractor.
//!
//! A from-scratch strided CNN whose taps sit at `/4, /8, /16, ...` of the
//! input, i.e. level `l` (1-based) has spatial size `H / 2^(l+1)`. The same
//! weights are applied to every view.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channels of the stride-2 stem.
    pub base_channels: usize,
    /// Output channels `C_l` per level; its length is the number of levels `L`.
    pub channels: Vec<usize>,
    pub norm_groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            base_channels: 16,
            channels: vec![32, 64, 128],
            norm_groups: 8,
        }
    }
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Downsampling factor of level `l` (0-based).
    pub fn factor(l: usize) -> usize {
        1 << (l + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one level".into()));
        }
        if self.base_channels == 0 || self.channels.contains(&0) || self.norm_groups == 0 {
            return Err(Error::Config("encoder channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks that `(h, w)` is divisible by `2^(L+1)`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = Self::factor(self.levels() - 1);
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by {f} (required for {} levels)",
                self.levels()
            )));
        }
        Ok(())
    }

    /// `(H_l, W_l)` for every level.
    pub fn level_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..self.levels())
            .map(|l| (h / Self::factor(l), w / Self::factor(l)))
            .collect()
    }
}

/// Per-level feature maps, each `(batch, C_l, H_l, W_l)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// `(H_l, W_l, C_l)` per level.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        self.levels
            .iter()
            .map(|t| {
                let (_, c, h, w) = t.dims4()?;
                Ok((h, w, c))
            })
            .collect()
    }

    /// Selects batch rows `[start, start + len)` of every level.
    pub fn narrow(&self, start: usize, len: usize) -> Result<FeaturePyramid> {
        Ok(FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|t| t.narrow(0, start, len))
                .collect::<candle_core::Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    norm1: GroupNorm,
    conv: Conv2d,
    norm2: GroupNorm,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    stem: Conv2d,
    stem_norm: GroupNorm,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let g = config.norm_groups;
        let stem = Conv2d::new(&mut pb.push("stem"), 1, config.base_channels, 3, 2, false)?;
        let stem_norm = GroupNorm::new(&mut pb.push("stem_norm"), config.base_channels, g)?;
        let mut stages = Vec::new();
        let mut prev = config.base_channels;
        for (l, &c) in config.channels.iter().enumerate() {
            let mut sp = pb.push(format!("level{l}"));
            stages.push(Stage {
                down: Conv2d::new(&mut sp.push("down"), prev, c, 3, 2, false)?,
                norm1: GroupNorm::new(&mut sp.push("norm1"), c, g)?,
                conv: Conv2d::new(&mut sp.push("conv"), c, c, 3, 1, false)?,
                norm2: GroupNorm::new(&mut sp.push("norm2"), c, g)?,
            });
            prev = c;
        }
        Ok(Encoder {
            config: config.clone(),
            stem,
            stem_norm,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Feature pyramid of a `(batch, 1, H, W)` image tensor.
    pub fn extract_features(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "encoder expects single-channel images, got {c}"
            )));
        }
        self.config.check_input(h, w)?;
        let mut x = self
            .stem_norm
            .forward(&self.stem.forward(images)?)?
            .silu()?;
        let mut levels = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            x = s.norm1.forward(&s.down.forward(&x)?)?.silu()?;
            x = s.norm2.forward(&s.conv.forward(&x)?)?.silu()?;
            levels.push(x.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}
