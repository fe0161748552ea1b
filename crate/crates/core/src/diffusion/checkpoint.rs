//! Self-describing checkpoint files: one JSON header line followed by the
//! raw little-endian tensor payload.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::train::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamGroup;

const FORMAT: &str = "dx2ct-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte ChaCha seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal word position (a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Config("malformed RNG state in checkpoint".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// One tensor with its raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredTensor {
    pub name: String,
    pub role: TensorRole,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    fn from_tensor(name: &str, role: TensorRole, group: ParamGroup, t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let bytes = match t.dtype() {
            DType::F32 => flat
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
            DType::F64 => flat
                .to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
            other => {
                return Err(Error::Config(format!(
                    "unsupported checkpoint dtype {other:?}"
                )))
            }
        };
        Ok(StoredTensor {
            name: name.to_string(),
            role,
            group,
            shape: t.dims().to_vec(),
            dtype: t.dtype(),
            bytes,
        })
    }

    fn to_tensor(&self, device: &candle_core::Device) -> Result<Tensor> {
        let t = match self.dtype {
            DType::F32 => {
                let v: Vec<f32> = self
                    .bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), device)?
            }
            DType::F64 => {
                let v: Vec<f64> = self
                    .bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, self.shape.as_slice(), device)?
            }
            other => {
                return Err(Error::Config(format!(
                    "unsupported checkpoint dtype {other:?}"
                )))
            }
        };
        Ok(t)
    }
}

/// Trained parameters of all five groups plus everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub step: u64,
    pub adam_steps: u64,
    pub rng: RngState,
    pub tensors: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    config: PipelineConfig,
    step: u64,
    adam_steps: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    role: TensorRole,
    group: ParamGroup,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    nbytes: usize,
}

fn dtype_tag(d: DType) -> &'static str {
    match d {
        DType::F64 => "f64le",
        _ => "f32le",
    }
}

impl Checkpoint {
    pub fn capture(
        config: &PipelineConfig,
        model: &Model,
        adam: &Adam,
        step: u64,
        rng: &ChaCha8Rng,
    ) -> Result<Self> {
        let mut tensors = Vec::new();
        for (name, group, var) in model.params().iter() {
            tensors.push(StoredTensor::from_tensor(
                name,
                TensorRole::Param,
                group,
                var.as_tensor(),
            )?);
        }
        for (name, (m, v)) in adam.moments() {
            let group = model.params().group_of(name).ok_or_else(|| {
                Error::Config(format!("optimizer state for unknown parameter {name}"))
            })?;
            tensors.push(StoredTensor::from_tensor(
                name,
                TensorRole::AdamM,
                group,
                m,
            )?);
            tensors.push(StoredTensor::from_tensor(
                name,
                TensorRole::AdamV,
                group,
                v,
            )?);
        }
        Ok(Checkpoint {
            config: config.clone(),
            step,
            adam_steps: adam.steps(),
            rng: RngState::capture(rng),
            tensors,
        })
    }

    /// Rebuilds the model, optimizer and data RNG.
    pub fn restore(&self) -> Result<(Model, Adam, ChaCha8Rng)> {
        let model = self.model()?;
        let device = model.device().clone();
        let mut firsts: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut moments = BTreeMap::new();
        for t in &self.tensors {
            match t.role {
                TensorRole::Param => {}
                TensorRole::AdamM => {
                    firsts.insert(t.name.clone(), t.to_tensor(&device)?);
                }
                TensorRole::AdamV => {
                    let m = firsts.remove(&t.name).ok_or_else(|| {
                        Error::Config(format!("second moment of {} without first", t.name))
                    })?;
                    moments.insert(t.name.clone(), (m, t.to_tensor(&device)?));
                }
            }
        }
        let adam = Adam::from_parts(self.config.trainer.adam, self.adam_steps, moments)?;
        Ok((model, adam, self.rng.restore()?))
    }

    /// Rebuilds only the model with the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let model = Model::new(&self.config.model, self.config.trainer.seed)?;
        let mut seen = 0;
        for t in self.tensors.iter().filter(|t| t.role == TensorRole::Param) {
            let var = model.params().get(&t.name).ok_or_else(|| {
                Error::Config(format!("checkpoint parameter {} not in the model", t.name))
            })?;
            if var.dims() != t.shape.as_slice() || var.dtype() != t.dtype {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} has a different shape or dtype",
                    t.name
                )));
            }
            var.set(&t.to_tensor(model.device())?)?;
            seen += 1;
        }
        if seen != model.params().len() {
            return Err(Error::Config(format!(
                "checkpoint holds {seen} of {} model parameters",
                model.params().len()
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    role: t.role,
                    group: t.group,
                    shape: t.shape.clone(),
                    dtype: dtype_tag(t.dtype).to_string(),
                    offset,
                    nbytes: t.bytes.len(),
                };
                offset += t.bytes.len();
                e
            })
            .collect();
        let header = Header {
            format: FORMAT.to_string(),
            version: VERSION,
            config: self.config.clone(),
            step: self.step,
            adam_steps: self.adam_steps,
            rng: self.rng.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        out.push(b'\n');
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| {
            Error::parse(bytes.len(), "checkpoint header is not newline-terminated")
        })?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| {
            Error::parse(
                e.column().saturating_sub(1),
                format!("checkpoint header: {e}"),
            )
        })?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::parse(
                0,
                format!("not a version {VERSION} checkpoint"),
            ));
        }
        header.config.validate()?;
        let payload = &bytes[nl + 1..];
        let mut expected = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let (dtype, width) = match e.dtype.as_str() {
                "f32le" => (DType::F32, 4),
                "f64le" => (DType::F64, 8),
                other => return Err(Error::parse(0, format!("unknown tensor dtype {other:?}"))),
            };
            if e.offset != expected || e.nbytes != e.shape.iter().product::<usize>() * width {
                return Err(Error::parse(
                    nl + 1 + e.offset,
                    format!("inconsistent layout for tensor {}", e.name),
                ));
            }
            let end = e.offset + e.nbytes;
            if end > payload.len() {
                return Err(Error::parse(
                    bytes.len(),
                    format!("checkpoint truncated inside tensor {}", e.name),
                ));
            }
            tensors.push(StoredTensor {
                name: e.name,
                role: e.role,
                group: e.group,
                shape: e.shape,
                dtype,
                bytes: payload[e.offset..end].to_vec(),
            });
            expected = end;
        }
        if expected != payload.len() {
            return Err(Error::parse(
                nl + 1 + expected,
                "trailing bytes after checkpoint payload",
            ));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            adam_steps: header.adam_steps,
            rng: header.rng,
            tensors,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
