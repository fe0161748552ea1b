//! Noise schedule, forward corruption, the ε-prediction objective, the
//! deterministic DDIM sampler and the training loop.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T` and `alpha_bar(0) = 1`
//! stands for clean data.

mod checkpoint;
mod optim;
mod sample;
mod train;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SliceSpec;
use crate::model::{Model, XrayBatch};
use crate::nn::{tensor_from_f64, tensor_to_f64};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, RngState, StoredTensor, TensorRole,
};
pub use optim::{Adam, AdamConfig};
pub use sample::{
    clip_noise_estimate, initial_noise, reconstruct_all_planes, reconstruct_volume,
    reconstruct_volume_from, sample_slice, SamplerConfig, SamplerOptions, SliceObserver,
};
pub use train::{train, LrSchedule, PipelineConfig, StepRecord, Trainer, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 50,
        }
    }
}

/// Linear β schedule with cumulative products and the DDIM subsequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    ddim: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let t_max = config.timesteps;
        if t_max < 2 {
            return Err(Error::Config(
                "need at least two diffusion timesteps".into(),
            ));
        }
        if !(0.0 < config.beta_start
            && config.beta_start < config.beta_end
            && config.beta_end < 1.0)
        {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start < end < 1, got {} .. {}",
                config.beta_start, config.beta_end
            )));
        }
        if config.ddim_steps == 0 || config.ddim_steps > t_max {
            return Err(Error::Config(format!("ddim_steps must lie in 1..={t_max}")));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                config.beta_start
                    + (config.beta_end - config.beta_start) * i as f64 / (t_max - 1) as f64
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        let s = config.ddim_steps;
        let ddim = if s == 1 {
            vec![t_max]
        } else {
            (0..s)
                .map(|i| 1 + ((i * (t_max - 1)) as f64 / (s - 1) as f64).round() as usize)
                .collect()
        };
        Ok(NoiseSchedule {
            betas,
            alpha_bars,
            ddim,
        })
    }

    /// `T`.
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// β_t for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        Ok(self.betas[t - 1])
    }

    /// ᾱ_t for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t, 0)?;
        Ok(if t == 0 { 1.0 } else { self.alpha_bars[t - 1] })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Increasing 1-based DDIM timesteps, ending at `T`.
    pub fn ddim_timesteps(&self) -> &[usize] {
        &self.ddim
    }

    /// `(t, t_prev)` pairs visited by the sampler, from `T` down to clean data.
    pub fn ddim_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.ddim.len())
            .rev()
            .map(|i| (self.ddim[i], if i == 0 { 0 } else { self.ddim[i - 1] }))
            .collect()
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.timesteps() {
            return Err(Error::Index {
                what: "timestep",
                index: t,
                len: self.timesteps(),
            });
        }
        Ok(())
    }
}

fn per_item(values: impl Iterator<Item = f64>, like: &Tensor) -> Result<Tensor> {
    let v: Vec<f64> = values.collect();
    let mut shape = vec![v.len()];
    shape.resize(like.rank(), 1);
    tensor_from_f64(v, &shape, like.dtype(), like.device())
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε` with one timestep per batch item
/// (`t = 0` returns `x0`).
pub fn forward_diffuse(
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::Shape(format!(
            "x0 {:?} and noise {:?} differ",
            x0.dims(),
            eps.dims()
        )));
    }
    if x0.rank() == 0 || x0.dims()[0] != t.len() {
        return Err(Error::Shape(format!(
            "{} timesteps for batch {:?}",
            t.len(),
            x0.dims()
        )));
    }
    let ab = t
        .iter()
        .map(|&t| schedule.alpha_bar(t))
        .collect::<Result<Vec<_>>>()?;
    let a = per_item(ab.iter().map(|a| a.sqrt()), x0)?;
    let s = per_item(ab.iter().map(|a| (1.0 - a).sqrt()), x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// One deterministic (η = 0) DDIM update from `t` to `t_prev <= t`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev > t {
        return Err(Error::Config(format!(
            "DDIM step must not go forward ({t} -> {t_prev})"
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    if t_prev == t {
        return Ok(x_t.clone());
    }
    let x0_pred = ((x_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    Ok(((x0_pred * ab_prev.sqrt())? + (eps_hat * (1.0 - ab_prev).sqrt())?)?)
}

/// Runs the full DDIM chain from `x_T` with an arbitrary ε predictor.
pub fn ddim_chain<F>(x_big_t: &Tensor, schedule: &NoiseSchedule, mut eps_fn: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut x = x_big_t.clone();
    for (t, t_prev) in schedule.ddim_pairs() {
        let eps = eps_fn(&x, t)?;
        x = ddim_step(&x, &eps, t, t_prev, schedule)?;
    }
    Ok(x)
}

/// One training batch: clean slices in `[-1, 1]`, their X-rays and the slice
/// each item was cut from.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x0: Tensor,
    pub xrays: XrayBatch,
    pub slices: Vec<SliceSpec>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Anything that predicts ε for a noisy training batch.
pub trait NoisePredictor {
    fn predict_noise(
        &self,
        x_t: &Tensor,
        t: &[usize],
        batch: &TrainBatch,
        schedule: &NoiseSchedule,
    ) -> Result<Tensor>;
}

impl NoisePredictor for Model {
    fn predict_noise(
        &self,
        x_t: &Tensor,
        t: &[usize],
        batch: &TrainBatch,
        schedule: &NoiseSchedule,
    ) -> Result<Tensor> {
        let features = self.encode(&batch.xrays)?;
        let conds = self.conditions(&features, &batch.slices)?;
        self.predict(x_t, t, &conds, schedule)
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    tensor_from_f64(v, shape, dtype, device)
}

/// Mean squared ε error with explicit timesteps and noise.
pub fn training_loss_with(
    predictor: &impl NoisePredictor,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    t: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Shape("empty training batch".into()));
    }
    if t.contains(&0) {
        return Err(Error::Index {
            what: "timestep",
            index: 0,
            len: schedule.timesteps(),
        });
    }
    let x_t = forward_diffuse(&batch.x0, t, eps, schedule)?;
    let eps_hat = predictor.predict_noise(&x_t, t, batch, schedule)?;
    let per_item = (eps - eps_hat)?.sqr()?.flatten_from(1)?.mean(1)?;
    let values = tensor_to_f64(&per_item)?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss for batch item {i}"
        )));
    }
    Ok(per_item.mean_all()?)
}

/// Mean squared ε error with `t ~ U{1..T}` and `ε ~ N(0, I)` drawn from `rng`.
pub fn training_loss(
    predictor: &impl NoisePredictor,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let t: Vec<usize> = (0..batch.len())
        .map(|_| rng.random_range(1..=schedule.timesteps()))
        .collect();
    let eps = gaussian(rng, batch.x0.dims(), batch.x0.dtype(), batch.x0.device())?;
    training_loss_with(predictor, batch, schedule, &t, &eps)
}
