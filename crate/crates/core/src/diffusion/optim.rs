use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1)
            || !unit(self.beta2)
            || self.eps <= 0.0
            || self.grad_clip.is_some_and(|c| c <= 0.0)
        {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with first and second moments keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub(crate) fn from_parts(
        config: AdamConfig,
        step: u64,
        moments: BTreeMap<String, (Tensor, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step,
            moments,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor, Tensor)> {
        &self.moments
    }

    /// Global L2 norm of all gradients present in `grads`.
    pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, _, var) in params.iter() {
            if let Some(g) = grads.get(var) {
                sq += g
                    .sqr()?
                    .sum_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies one update with learning rate `lr`; parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let scale = match self.config.grad_clip {
            Some(clip) => {
                let norm = Self::grad_norm(params, grads)?;
                if !norm.is_finite() {
                    return Err(Error::Numeric("non-finite gradient norm".into()));
                }
                if norm > clip {
                    clip / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, _, var) in params.iter() {
            let Some(g) = grads.get(var) else { continue };
            let g = (g.detach() * scale)?;
            let (m, v) = match self.moments.get(name) {
                Some(mv) => mv.clone(),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * lr)?)?)?;
            self.moments.insert(name.to_string(), (m, v));
        }
        Ok(())
    }
}
