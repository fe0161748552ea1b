use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ddim_chain, gaussian, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::{Plane, SliceSpec};
use crate::model::{tensor_to_slices, Model, XrayBatch, XrayFeatures};
use crate::par::Exec;
use crate::phantom::{stack_slices, Volume, XRaySet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Slices denoised together in one batch.
    pub chunk_size: usize,
    /// Clamp each step's `x0` prediction to `[-1, 1]` (and re-derive the
    /// noise estimate from it) before taking the DDIM step.
    pub clip_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chunk_size: 8,
            clip_denoised: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("sampler chunk size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Hook receiving each slice and the exact starting noise it was sampled from.
pub type SliceObserver<'a> = dyn Fn(&SliceSpec, &Tensor) + Sync + 'a;

#[derive(Clone, Copy)]
pub struct SamplerOptions<'a> {
    pub chunk_size: usize,
    pub clip_denoised: bool,
    pub exec: Exec,
    pub observer: Option<&'a SliceObserver<'a>>,
}

impl Default for SamplerOptions<'_> {
    fn default() -> Self {
        SamplerOptions::from_config(&SamplerConfig::default(), Exec::default())
    }
}

impl SamplerOptions<'_> {
    pub fn from_config(config: &SamplerConfig, exec: Exec) -> Self {
        SamplerOptions {
            chunk_size: config.chunk_size,
            clip_denoised: config.clip_denoised,
            exec,
            observer: None,
        }
    }
}

impl std::fmt::Debug for SamplerOptions<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SamplerOptions")
            .field("chunk_size", &self.chunk_size)
            .field("clip_denoised", &self.clip_denoised)
            .field("exec", &self.exec)
            .field("observer", &self.observer.is_some())
            .finish()
    }
}

/// The shared starting noise `x_T`, shape `(1, 1, h, w)`.
pub fn initial_noise(
    seed: u64,
    h: usize,
    w: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian(&mut rng, &[1, 1, h, w], dtype, device)
}

fn cube_side(xrays: &XRaySet) -> Result<usize> {
    let (h, w) = xrays.dim();
    if h != w {
        return Err(Error::Config(format!(
            "reconstruction needs square X-rays, got {h}x{w}"
        )));
    }
    Ok(h)
}

fn single_features(model: &Model, xrays: &XRaySet) -> Result<XrayFeatures> {
    let batch = XrayBatch::from_sets(&[xrays], model.dtype(), model.device())?;
    model.encode(&batch)
}

/// Noise estimate consistent with the `x0` prediction clamped to `[-1, 1]`.
pub fn clip_noise_estimate(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0 = ((x_t - (eps_hat * sb)?)? / sa)?.clamp(-1.0, 1.0)?;
    Ok(((x_t - (x0 * sa)?)? / sb)?)
}

/// Denoises a batch of slices that all start from the same `x_T`.
fn sample_batch(
    model: &Model,
    schedule: &NoiseSchedule,
    features: &XrayFeatures,
    slices: &[SliceSpec],
    x_big_t: &Tensor,
    clip: bool,
) -> Result<Tensor> {
    let b = slices.len();
    let conds = model.conditions(&features.repeat(b)?, slices)?;
    let (_, _, h, w) = x_big_t.dims4()?;
    let start = x_big_t.broadcast_as((b, 1, h, w))?.contiguous()?;
    let out = ddim_chain(&start, schedule, |x, t| {
        let eps = model.predict(x, &vec![t; b], &conds, schedule)?;
        if clip {
            clip_noise_estimate(x, &eps, t, schedule)
        } else {
            Ok(eps)
        }
    })?;
    Ok(out.detach())
}

/// One slice, shape `(1, 1, H, W)`, on the model's `[-1, 1]` scale.
pub fn sample_slice(
    model: &Model,
    schedule: &NoiseSchedule,
    xrays: &XRaySet,
    plane: Plane,
    index: usize,
    x_big_t: &Tensor,
    clip_denoised: bool,
) -> Result<Tensor> {
    let r = cube_side(xrays)?;
    let spec = SliceSpec::new(plane, index, r, r, r)?;
    sample_batch(
        model,
        schedule,
        &single_features(model, xrays)?,
        &[spec],
        x_big_t,
        clip_denoised,
    )
}

/// Reconstructs all slices of `plane` from the given `x_T` and stacks them
/// along the plane normal, mapped to `[0, 1]`.
pub fn reconstruct_volume_from(
    model: &Model,
    schedule: &NoiseSchedule,
    xrays: &XRaySet,
    plane: Plane,
    x_big_t: &Tensor,
    options: &SamplerOptions<'_>,
) -> Result<Volume> {
    let r = cube_side(xrays)?;
    if x_big_t.dims() != [1, 1, r, r] {
        return Err(Error::Shape(format!(
            "initial noise {:?} does not match {r}x{r} slices",
            x_big_t.dims()
        )));
    }
    let chunk = options.chunk_size.max(1);
    let features = single_features(model, xrays)?;
    let specs = (1..=r)
        .map(|n| SliceSpec::new(plane, n, r, r, r))
        .collect::<Result<Vec<_>>>()?;
    let chunks: Vec<&[SliceSpec]> = specs.chunks(chunk).collect();
    let outputs = options.exec.try_map(chunks.len(), |c| {
        if let Some(observe) = options.observer {
            for s in chunks[c] {
                observe(s, x_big_t);
            }
        }
        tensor_to_slices(&sample_batch(
            model,
            schedule,
            &features,
            chunks[c],
            x_big_t,
            options.clip_denoised,
        )?)
    })?;
    let slices: Vec<_> = outputs.into_iter().flatten().collect();
    let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
    Volume::new(stack_slices(plane, &views)?)
}

/// Draws `x_T` from `seed` and reconstructs one plane's volume.
pub fn reconstruct_volume(
    model: &Model,
    schedule: &NoiseSchedule,
    xrays: &XRaySet,
    plane: Plane,
    seed: u64,
    options: &SamplerOptions<'_>,
) -> Result<Volume> {
    let r = cube_side(xrays)?;
    let x_big_t = initial_noise(seed, r, r, model.dtype(), model.device())?;
    reconstruct_volume_from(model, schedule, xrays, plane, &x_big_t, options)
}

/// Axial, coronal and sagittal reconstructions sharing one `x_T`.
pub fn reconstruct_all_planes(
    model: &Model,
    schedule: &NoiseSchedule,
    xrays: &XRaySet,
    seed: u64,
    options: &SamplerOptions<'_>,
) -> Result<[Volume; 3]> {
    let r = cube_side(xrays)?;
    let x_big_t = initial_noise(seed, r, r, model.dtype(), model.device())?;
    let [a, c, s] = Plane::ALL;
    Ok([
        reconstruct_volume_from(model, schedule, xrays, a, &x_big_t, options)?,
        reconstruct_volume_from(model, schedule, xrays, c, &x_big_t, options)?,
        reconstruct_volume_from(model, schedule, xrays, s, &x_big_t, options)?,
    ])
}
