use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{group_count, group_norm, Conv2d, ParamBuilder};

/// Spatially-adaptive normalization: `GN(h) * (1 + gamma(c)) + beta(c)`,
/// where `GN` has no parameters and `gamma`, `beta` are two-layer conv
/// nets on the condition map sharing their hidden layer.
#[derive(Debug, Clone)]
pub struct Spade {
    groups: usize,
    hidden: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Spade {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        groups: usize,
        zero_init: bool,
    ) -> Result<Self> {
        Ok(Spade {
            groups: group_count(channels, groups),
            hidden: Conv2d::new(&mut pb.push("hidden"), cond_channels, hidden, 3, 1, false)?
                .with_replicate_padding(),
            gamma: Conv2d::new(&mut pb.push("gamma"), hidden, channels, 3, 1, zero_init)?
                .with_replicate_padding(),
            beta: Conv2d::new(&mut pb.push("beta"), hidden, channels, 3, 1, zero_init)?
                .with_replicate_padding(),
        })
    }

    /// Parameter-free normalization only (the conditioning path switched off).
    pub fn plain(&self, h: &Tensor) -> Result<Tensor> {
        group_norm(h, self.groups)
    }

    pub fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (_, _, hh, hw) = h.dims4()?;
        let (_, _, ch, cw) = cond.dims4()?;
        if (hh, hw) != (ch, cw) {
            return Err(Error::Shape(format!(
                "feature map is {hh}x{hw} but condition map is {ch}x{cw}"
            )));
        }
        let normed = group_norm(h, self.groups)?;
        let a = self.hidden.forward(cond)?.silu()?;
        let gamma = self.gamma.forward(&a)?.affine(1.0, 1.0)?;
        let beta = self.beta.forward(&a)?;
        Ok((normed * gamma)?.add(&beta)?)
    }
}

/// Receptive-field radius (pixels) of the condition path.
pub const SPADE_RADIUS: usize = 2;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_abs_diff, tensor_to_f64, ParamGroup, ParamStore, Precision};
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spade(zero: bool) -> (ParamStore, Spade) {
        let mut store = ParamStore::new(Precision::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Spade::new(
            &mut store.builder(&mut rng, ParamGroup::Denoiser, "spade"),
            8,
            6,
            16,
            4,
            zero,
        )
        .unwrap();
        (store, s)
    }

    #[test]
    fn zero_init_is_plain_group_norm() {
        let (_, s) = spade(true);
        let h = Tensor::randn(0f64, 2.0, (2, 8, 5, 5), &Device::Cpu).unwrap();
        let c = Tensor::randn(0f64, 1.0, (2, 6, 5, 5), &Device::Cpu).unwrap();
        assert_eq!(
            max_abs_diff(&s.forward(&h, &c).unwrap(), &s.plain(&h).unwrap()).unwrap(),
            0.0
        );
    }

    #[test]
    fn hot_pixel_stays_inside_receptive_field() {
        let (_, s) = spade(false);
        let (hh, ww) = (9, 10);
        let h = Tensor::randn(0f64, 1.0, (1, 8, hh, ww), &Device::Cpu).unwrap();
        let (pr, pc) = (3usize, 6usize);
        let mut c = vec![0.0; 6 * hh * ww];
        c[2 * hh * ww + pr * ww + pc] = 1.5;
        let c = Tensor::from_vec(c, (1, 6, hh, ww), &Device::Cpu).unwrap();
        let out = tensor_to_f64(&s.forward(&h, &c).unwrap()).unwrap();
        let base = tensor_to_f64(&s.plain(&h).unwrap()).unwrap();
        let mut changed_inside = false;
        for ch in 0..8 {
            for r in 0..hh {
                for col in 0..ww {
                    let i = ch * hh * ww + r * ww + col;
                    let inside = r.abs_diff(pr) <= SPADE_RADIUS && col.abs_diff(pc) <= SPADE_RADIUS;
                    if inside {
                        changed_inside |= out[i] != base[i];
                    } else {
                        assert_eq!(
                            out[i], base[i],
                            "pixel ({r},{col}) outside the field changed"
                        );
                    }
                }
            }
        }
        assert!(changed_inside);
    }

    #[test]
    fn constant_inputs_give_constant_output() {
        let (_, s) = spade(false);
        let h = Tensor::full(0.7f64, (1, 8, 9, 9), &Device::Cpu).unwrap();
        let c = Tensor::full(0.3f64, (1, 6, 9, 9), &Device::Cpu).unwrap();
        let out = tensor_to_f64(&s.forward(&h, &c).unwrap()).unwrap();
        for ch in 0..8 {
            let plane = &out[ch * 81..(ch + 1) * 81];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn spatial_mismatch_is_an_error() {
        let (_, s) = spade(true);
        let h = Tensor::zeros((1, 8, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let c = Tensor::zeros((1, 6, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(s.forward(&h, &c), Err(Error::Shape(_))));
    }
}
