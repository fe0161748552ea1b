//! Position-encoding networks: Fourier features of normalized 3-D
//! coordinates, a pointwise MLP, and non-overlapping average pooling down to
//! each feature-pyramid resolution.
//!
//! The CT network emits `C_P` channels at every level. The X-ray network
//! shares the architecture (separate weights) and adds a linear head per
//! level mapping `C_P -> C_l` so its output can be added to the X-ray
//! features.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{xray_coord_grid, PositionGrid, View};
use crate::nn::{tensor_from_f64, Linear, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosEncConfig {
    /// Frequencies `F` per coordinate component.
    pub num_freqs: usize,
    /// Embedding width `C_P`.
    pub width: usize,
    /// Hidden layers of the MLP (each `width` wide).
    pub hidden_layers: usize,
}

impl Default for PosEncConfig {
    fn default() -> Self {
        PosEncConfig {
            num_freqs: 6,
            width: 64,
            hidden_layers: 2,
        }
    }
}

impl PosEncConfig {
    pub fn encoded_dim(&self) -> usize {
        3 * 2 * self.num_freqs
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_freqs == 0 || self.width == 0 {
            return Err(Error::Config(
                "positional encoding needs F >= 1 and width >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `(sin(2^k pi c), cos(2^k pi c))` for `k = 0..F`, per component, for every
/// row of an `(n, 3)` coordinate array. Output is `(n, 6F)`.
pub fn fourier_encode(coords: &Array2<f64>, num_freqs: usize) -> Array2<f64> {
    let n = coords.nrows();
    let mut out = Array2::zeros((n, 3 * 2 * num_freqs));
    for (i, row) in coords.rows().into_iter().enumerate() {
        let mut j = 0;
        for &c in row.iter() {
            for k in 0..num_freqs {
                let a = (1u64 << k) as f64 * PI * c;
                out[[i, j]] = a.sin();
                out[[i, j + 1]] = a.cos();
                j += 2;
            }
        }
    }
    out
}

fn grid_rows(grid: &PositionGrid) -> Array2<f64> {
    let (h, w) = (grid.height(), grid.width());
    grid.coords
        .to_shape((h * w, 3))
        .expect("contiguous grid")
        .to_owned()
}

/// Pointwise MLP from Fourier features to `width` channels.
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(pb: &mut ParamBuilder<'_>, config: &PosEncConfig) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = config.encoded_dim();
        for i in 0..=config.hidden_layers {
            layers.push(Linear::new(
                &mut pb.push(format!("fc{i}")),
                prev,
                config.width,
                false,
            )?);
            prev = config.width;
        }
        Ok(Mlp { layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.silu()?;
            }
        }
        Ok(h)
    }
}

/// Average-pools `(b, c, H, W)` down to each `(H_l, W_l)` with window = stride.
pub fn pool_levels(map: &Tensor, level_sizes: &[(usize, usize)]) -> Result<Vec<Tensor>> {
    let (_, _, h, w) = map.dims4()?;
    level_sizes
        .iter()
        .map(|&(hl, wl)| {
            if hl == 0 || wl == 0 || h % hl != 0 || w % wl != 0 {
                return Err(Error::Config(format!(
                    "{h}x{w} grid cannot be pooled to {hl}x{wl}"
                )));
            }
            let k = (h / hl, w / wl);
            if k == (1, 1) {
                return Ok(map.clone());
            }
            Ok(map.avg_pool2d_with_stride(k, k)?)
        })
        .collect()
}

fn encode_grids(
    grids: &[PositionGrid],
    config: &PosEncConfig,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, usize, usize)> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Shape("no coordinate grids".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut values = Vec::with_capacity(grids.len() * h * w * config.encoded_dim());
    for g in grids {
        if (g.height(), g.width()) != (h, w) {
            return Err(Error::Shape(
                "coordinate grids in one batch must share a size".into(),
            ));
        }
        values.extend(fourier_encode(&grid_rows(g), config.num_freqs).iter());
    }
    let t = tensor_from_f64(
        values,
        &[grids.len(), h * w, config.encoded_dim()],
        dtype,
        device,
    )?;
    Ok((t, h, w))
}

// (b, h*w, c) -> (b, c, h, w)
fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    crate::nn::from_tokens(x, h, w)
}

/// CT positional embeddings: one `(b, C_P, H_l, W_l)` map per level.
#[derive(Debug, Clone)]
pub struct CtPE {
    pub levels: Vec<Tensor>,
}

/// X-ray positional embeddings: one `(1, C_l, H_l, W_l)` map per level.
#[derive(Debug, Clone)]
pub struct XrayPE {
    pub levels: Vec<Tensor>,
}

/// The CT-slice position network.
#[derive(Debug, Clone)]
pub struct CtPositionNet {
    config: PosEncConfig,
    mlp: Mlp,
}

impl CtPositionNet {
    pub fn new(pb: &mut ParamBuilder<'_>, config: &PosEncConfig) -> Result<Self> {
        config.validate()?;
        Ok(CtPositionNet {
            config: config.clone(),
            mlp: Mlp::new(pb, config)?,
        })
    }

    pub fn config(&self) -> &PosEncConfig {
        &self.config
    }

    /// Full-resolution `(b, C_P, H, W)` embedding map before pooling.
    pub fn trunk_map(
        &self,
        grids: &[PositionGrid],
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        let (enc, h, w) = encode_grids(grids, &self.config, dtype, device)?;
        tokens_to_map(&self.mlp.forward(&enc)?, h, w)
    }

    /// Multi-scale embeddings of a batch of slice grids.
    pub fn embed(
        &self,
        grids: &[PositionGrid],
        level_sizes: &[(usize, usize)],
        dtype: DType,
        device: &Device,
    ) -> Result<CtPE> {
        let map = self.trunk_map(grids, dtype, device)?;
        Ok(CtPE {
            levels: pool_levels(&map, level_sizes)?,
        })
    }
}

/// The X-ray position network.
#[derive(Debug, Clone)]
pub struct XrayPositionNet {
    config: PosEncConfig,
    mlp: Mlp,
    heads: Vec<Linear>,
}

impl XrayPositionNet {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        config: &PosEncConfig,
        channel_plan: &[usize],
    ) -> Result<Self> {
        config.validate()?;
        let mlp = Mlp::new(&mut pb.push("trunk"), config)?;
        let heads = channel_plan
            .iter()
            .enumerate()
            .map(|(l, &c)| Linear::new(&mut pb.push(format!("head{l}")), config.width, c, false))
            .collect::<Result<_>>()?;
        Ok(XrayPositionNet {
            config: config.clone(),
            mlp,
            heads,
        })
    }

    /// Multi-scale embeddings of one detector plane.
    pub fn embed(
        &self,
        view: View,
        h: usize,
        w: usize,
        level_sizes: &[(usize, usize)],
        dtype: DType,
        device: &Device,
    ) -> Result<XrayPE> {
        if level_sizes.len() != self.heads.len() {
            return Err(Error::Config(format!(
                "X-ray position network has {} heads but {} levels were requested",
                self.heads.len(),
                level_sizes.len()
            )));
        }
        let grid = xray_coord_grid(view, h, w)?;
        let (enc, h, w) = encode_grids(std::slice::from_ref(&grid), &self.config, dtype, device)?;
        let map = tokens_to_map(&self.mlp.forward(&enc)?, h, w)?;
        // The heads are affine, so applying them after pooling is exact.
        let levels = pool_levels(&map, level_sizes)?
            .into_iter()
            .zip(&self.heads)
            .map(|(m, head)| {
                let (_, _, hl, wl) = m.dims4()?;
                let t = crate::nn::to_tokens(&m)?;
                tokens_to_map(&head.forward(&t)?, hl, wl)
            })
            .collect::<Result<_>>()?;
        Ok(XrayPE { levels })
    }
}
