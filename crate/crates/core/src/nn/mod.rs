//! Minimal layer toolkit over `candle_core` tensors.
//!
//! Parameters are owned by a [`ParamStore`] and tagged with the network they
//! belong to; layers hold cheap handles to the same storage, so in-place
//! optimizer updates are visible to every layer immediately.

mod params;

pub use params::{ParamBuilder, ParamGroup, ParamStore, Precision};

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Dense layer over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_dim: usize,
        out_dim: usize,
        zero: bool,
    ) -> Result<Self> {
        let weight = if zero {
            pb.zeros("weight", &[out_dim, in_dim])?
        } else {
            pb.fan_in("weight", &[out_dim, in_dim], in_dim)?
        };
        let bias = pb.zeros("bias", &[out_dim])?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Square-kernel 2-D convolution over NCHW tensors.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    replicate: bool,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        zero: bool,
    ) -> Result<Self> {
        let shape = [out_ch, in_ch, kernel, kernel];
        let weight = if zero {
            pb.zeros("weight", &shape)?
        } else {
            pb.fan_in("weight", &shape, in_ch * kernel * kernel)?
        };
        let bias = pb.zeros("bias", &[out_ch])?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            replicate: false,
        })
    }

    /// Pads by repeating edge pixels instead of zeros.
    pub fn with_replicate_padding(mut self) -> Self {
        self.replicate = true;
        self
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if self.replicate && self.padding > 0 {
            let p = self.padding;
            let padded = x.pad_with_same(2, p, p)?.pad_with_same(3, p, p)?;
            padded.conv2d(&self.weight, 0, self.stride, 1, 1)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        let c = self.bias.dims()[0];
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Parameter-free group normalization of an NCHW tensor.
pub fn group_norm(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % groups != 0 {
        return Err(Error::Config(format!(
            "{c} channels not divisible into {groups} groups"
        )));
    }
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(D::Minus1)?;
    let centered = g.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

/// Largest group count `<= preferred` that divides `channels`.
pub fn group_count(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

/// Group normalization followed by a learned per-channel affine map.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, groups: usize) -> Result<Self> {
        Ok(GroupNorm {
            groups: group_count(channels, groups),
            gamma: pb.ones("gamma", &[channels])?,
            beta: pb.zeros("beta", &[channels])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.gamma.dims()[0];
        let y = group_norm(x, self.groups)?;
        Ok(y.broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalization over the last dimension with learned affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: pb.ones("gamma", &[dim])?,
            beta: pb.zeros("beta", &[dim])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)?)
    }
}

/// Softmax over the last dimension (max-shifted; the shift carries no gradient).
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

// Row-stochastic interpolation matrix (dst x src), half-pixel centers.
fn bilinear_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        m[i * src + lo] += 1.0 - frac;
        m[i * src + hi] += frac;
    }
    m
}

/// Bilinear resize of an NCHW tensor, expressed as two matrix products so it
/// stays differentiable. Equal sizes are returned unchanged.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let cols = x.broadcast_matmul(&rx.t()?)?;
    Ok(ry.broadcast_matmul(&cols)?)
}

/// `(b, c, h, w)` -> `(b, h*w, c)` token layout (row-major pixels).
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if n != h * w {
        return Err(Error::Shape(format!(
            "{n} tokens cannot form a {h}x{w} map"
        )));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Builds a tensor of the requested dtype from `f64` values.
pub fn tensor_from_f64(
    values: Vec<f64>,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Flattens any tensor into `f64` values.
pub fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Largest absolute elementwise difference between two tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?;
    Ok(d.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (s, d) in [(4, 8), (8, 4), (3, 7), (5, 5)] {
            let m = bilinear_matrix(s, d);
            for r in 0..d {
                let sum: f64 = m[r * s..(r + 1) * s].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::full(0.75f64, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 8, 2).unwrap();
        assert_eq!(y.dims(), &[2, 3, 8, 2]);
        for v in tensor_to_f64(&y).unwrap() {
            assert!((v - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_doubles_with_half_pixel_weights() {
        let x = Tensor::from_vec(vec![0.0f64, 1.0], (1, 1, 1, 2), &Device::Cpu).unwrap();
        let y = tensor_to_f64(&resize_bilinear(&x, 1, 4).unwrap()).unwrap();
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn group_norm_moments() {
        let x = Tensor::randn(0.0f64, 3.0, (2, 8, 4, 4), &Device::Cpu).unwrap();
        let y = group_norm(&x, 4).unwrap();
        let g = y.reshape((2, 4, 32)).unwrap();
        let mean = tensor_to_f64(&g.mean_keepdim(D::Minus1).unwrap()).unwrap();
        let var = tensor_to_f64(&g.sqr().unwrap().mean_keepdim(D::Minus1).unwrap()).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-10));
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-3));
        assert_eq!(group_count(48, 8), 8);
        assert_eq!(group_count(12, 8), 6);
        assert_eq!(group_count(3, 8), 3);
    }

    #[test]
    fn softmax_is_a_distribution() {
        let x = Tensor::new(&[[1000.0f64, 1001.0, 999.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s = softmax_last_dim(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn token_round_trip() {
        let x = Tensor::randn(0.0f32, 1.0, (2, 5, 3, 4), &Device::Cpu).unwrap();
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.dims(), &[2, 12, 5]);
        // token index = row * w + col
        let a = x
            .get(1)
            .unwrap()
            .get(4)
            .unwrap()
            .get(2)
            .unwrap()
            .get(1)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        let b = t
            .get(1)
            .unwrap()
            .get(2 * 4 + 1)
            .unwrap()
            .get(4)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(
            max_abs_diff(&from_tokens(&t, 3, 4).unwrap(), &x).unwrap(),
            0.0
        );
    }
}
