use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point precision of model parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// The five independently named networks of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// X-ray feature extractor.
    Encoder,
    /// CT-slice position network.
    CtPosition,
    /// X-ray position network.
    XrayPosition,
    /// Positional-query transformers (or the bypass projection when disabled).
    Transformer,
    /// Conditional U-Net.
    Denoiser,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::CtPosition,
        ParamGroup::XrayPosition,
        ParamGroup::Transformer,
        ParamGroup::Denoiser,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::CtPosition => "ct_position",
            ParamGroup::XrayPosition => "xray_position",
            ParamGroup::Transformer => "transformer",
            ParamGroup::Denoiser => "denoiser",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
struct Entry {
    group: ParamGroup,
    var: Var,
}

/// Named, grouped trainable parameters.
#[derive(Debug)]
pub struct ParamStore {
    precision: Precision,
    device: Device,
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new(precision: Precision) -> Self {
        ParamStore {
            precision,
            device: Device::Cpu,
            entries: BTreeMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Starts registering parameters of `group` under `prefix`.
    pub fn builder<'a>(
        &'a mut self,
        rng: &'a mut ChaCha8Rng,
        group: ParamGroup,
        prefix: &str,
    ) -> ParamBuilder<'a> {
        ParamBuilder {
            store: self,
            rng,
            group,
            prefix: prefix.to_string(),
        }
    }

    /// `(name, group, var)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamGroup, &Var)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.group, &e.var))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn group_of(&self, name: &str) -> Option<ParamGroup> {
        self.entries.get(name).map(|e| e.group)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar parameters in `group`.
    pub fn scalar_count(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(_, g, _)| *g == group)
            .map(|(_, _, v)| v.elem_count())
            .sum()
    }

    fn var(&self, name: &str) -> Result<&Var> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    /// All values of `name` as `f64`.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        crate::nn::tensor_to_f64(self.var(name)?.as_tensor())
    }

    /// Overwrites the whole parameter `name` with `values` (converted to the store dtype).
    pub fn set_values(&self, name: &str, values: Vec<f64>) -> Result<()> {
        let var = self.var(name)?;
        let t = crate::nn::tensor_from_f64(values, var.dims(), self.dtype(), &self.device)?;
        var.set(&t)?;
        Ok(())
    }

    /// Reads one scalar of a parameter (flat row-major index).
    pub fn scalar(&self, name: &str, index: usize) -> Result<f64> {
        Ok(self.values(name)?[index])
    }

    /// Writes one scalar of a parameter (flat row-major index).
    pub fn set_scalar(&self, name: &str, index: usize, value: f64) -> Result<()> {
        let mut v = self.values(name)?;
        v[index] = value;
        self.set_values(name, v)
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, _, var) in self.iter().filter(|(k, _, _)| k.starts_with(prefix)) {
            var.set(&var.as_tensor().zeros_like()?)
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
            n += 1;
        }
        Ok(n)
    }

    /// Re-draws every parameter under `prefix` from `N(0, std^2)`.
    pub fn randomize_prefix(&self, prefix: &str, std: f64, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = 0;
        for (name, _, var) in self.iter().filter(|(k, _, _)| k.starts_with(prefix)) {
            let vals = normal_values(&mut rng, var.elem_count(), std);
            self.set_values(name, vals)?;
            n += 1;
        }
        Ok(n)
    }

    fn register(&mut self, name: String, group: ParamGroup, tensor: Tensor) -> Result<Tensor> {
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        let var = Var::from_tensor(&tensor)?;
        let handle = var.as_tensor().clone();
        self.entries.insert(name, Entry { group, var });
        Ok(handle)
    }
}

fn normal_values(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Registers parameters in a [`ParamStore`] under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    group: ParamGroup,
    prefix: String,
}

impl ParamBuilder<'_> {
    /// Nested builder for `prefix.name`.
    pub fn push(&mut self, name: impl fmt::Display) -> ParamBuilder<'_> {
        ParamBuilder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            group: self.group,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn make(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = crate::nn::tensor_from_f64(values, shape, self.store.dtype(), &self.store.device)?;
        self.store
            .register(format!("{}.{}", self.prefix, name), self.group, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = normal_values(self.rng, n, std);
        self.make(name, shape, values)
    }

    /// `N(0, 1 / fan_in)` initialization.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        self.normal(name, shape, (1.0 / fan_in.max(1) as f64).sqrt())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.make(name, shape, vec![0.0; shape.iter().product()])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.make(name, shape, vec![1.0; shape.iter().product()])
    }
}
