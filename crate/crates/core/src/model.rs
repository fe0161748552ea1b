//! The full conditional denoiser: encoder, position networks, positional
//! query transformers (or the raw-feature bypass) and the U-Net.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{make_unconditioned_inputs, FeatureBypass, UNet, UNetConfig};
use crate::diffusion::NoiseSchedule;
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::geometry::{slice_coord_grid, SliceSpec, View};
use crate::nn::{tensor_from_f64, ParamGroup, ParamStore, Precision};
use crate::phantom::{Mode, XRaySet};
use crate::posenc::{CtPositionNet, PosEncConfig, XrayPositionNet};
use crate::pqt::{ConditionSet, PositionalQueryTransformer, PqtConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub posenc: PosEncConfig,
    pub pqt: PqtConfig,
    /// When false, raw X-ray features are resized and projected instead.
    pub pqt_enabled: bool,
    pub unet: UNetConfig,
    pub mode: Mode,
    pub precision: Precision,
    pub prediction: Prediction,
}

/// What the U-Net output stands for. [`Model::predict`] always returns ε̂.
///
/// With `Velocity` the network predicts v and `ε̂ = sqrt(ᾱ_t) v̂ + sqrt(1 - ᾱ_t) x_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    #[default]
    Epsilon,
    Velocity,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            posenc: PosEncConfig::default(),
            pqt: PqtConfig::default(),
            pqt_enabled: true,
            unet: UNetConfig::default(),
            mode: Mode::Biplanar,
            precision: Precision::F32,
            prediction: Prediction::Epsilon,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.posenc.validate()?;
        self.unet.validate()?;
        if self.pqt_enabled {
            self.pqt.validate(self.posenc.width)?;
        }
        let taps: Vec<usize> = (0..self.encoder.levels())
            .map(EncoderConfig::factor)
            .collect();
        if taps != self.unet.tap_factors {
            return Err(Error::Config(format!(
                "U-Net tap factors {:?} must match the encoder levels {:?}",
                self.unet.tap_factors, taps
            )));
        }
        Ok(())
    }

    /// Checks that slices of an `r`-cube can be processed.
    pub fn check_resolution(&self, r: usize) -> Result<()> {
        self.encoder.check_input(r, r)?;
        self.unet.check_input(r, r)
    }

    fn views(&self) -> usize {
        match self.mode {
            Mode::Biplanar => 2,
            Mode::Monoplanar => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Conditioner {
    Pqt {
        ct_pos: CtPositionNet,
        xray_pos: XrayPositionNet,
        pqt: PositionalQueryTransformer,
    },
    Bypass(FeatureBypass),
}

/// X-ray images of a batch as `(b, 1, H, W)` tensors in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct XrayBatch {
    pub pa: Tensor,
    pub lat: Option<Tensor>,
}

impl XrayBatch {
    pub fn from_sets(sets: &[&XRaySet], dtype: DType, device: &Device) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Shape("empty X-ray batch".into()))?;
        let mode = first.mode();
        if sets
            .iter()
            .any(|s| s.mode() != mode || s.dim() != first.dim())
        {
            return Err(Error::Shape(
                "X-ray sets in one batch must share mode and size".into(),
            ));
        }
        let stack = |imgs: Vec<&Array2<f32>>| -> Result<Tensor> {
            let (h, w) = imgs[0].dim();
            let mut values = Vec::with_capacity(imgs.len() * h * w);
            for img in &imgs {
                values.extend(to_signed(img));
            }
            tensor_from_f64(values, &[imgs.len(), 1, h, w], dtype, device)
        };
        let pa = stack(sets.iter().map(|s| s.pa()).collect())?;
        let lat = match mode {
            Mode::Biplanar => Some(stack(
                sets.iter().map(|s| s.lat().expect("biplanar")).collect(),
            )?),
            Mode::Monoplanar => None,
        };
        Ok(XrayBatch { pa, lat })
    }

    pub fn len(&self) -> usize {
        self.pa.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoded X-rays of a batch.
#[derive(Debug, Clone)]
pub struct XrayFeatures {
    pub pa: FeaturePyramid,
    pub lat: Option<FeaturePyramid>,
}

impl XrayFeatures {
    /// Repeats single-item features `n` times along the batch axis.
    pub fn repeat(&self, n: usize) -> Result<XrayFeatures> {
        let rep = |f: &FeaturePyramid| -> Result<FeaturePyramid> {
            let levels = f
                .levels
                .iter()
                .map(|t| {
                    let mut dims = t.dims().to_vec();
                    dims[0] = n;
                    t.broadcast_as(dims)?.contiguous()
                })
                .collect::<candle_core::Result<_>>()?;
            Ok(FeaturePyramid { levels })
        };
        Ok(XrayFeatures {
            pa: rep(&self.pa)?,
            lat: self.lat.as_ref().map(rep).transpose()?,
        })
    }
}

/// Trainable parameters plus the networks reading them.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    conditioner: Conditioner,
    unet: UNet,
}

impl Model {
    /// Builds a freshly initialized model; initialization is a pure function
    /// of `(config, seed)`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.precision);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(
            &mut store.builder(&mut rng, ParamGroup::Encoder, "encoder"),
            &config.encoder,
        )?;
        let cond_channels = config.posenc.width;
        let conditioner = if config.pqt_enabled {
            let ct_pos = CtPositionNet::new(
                &mut store.builder(&mut rng, ParamGroup::CtPosition, "ct_pos"),
                &config.posenc,
            )?;
            let xray_pos = XrayPositionNet::new(
                &mut store.builder(&mut rng, ParamGroup::XrayPosition, "xray_pos"),
                &config.posenc,
                &config.encoder.channels,
            )?;
            let pqt = PositionalQueryTransformer::new(
                &mut store.builder(&mut rng, ParamGroup::Transformer, "pqt"),
                &config.pqt,
                config.posenc.width,
                &config.encoder.channels,
            )?;
            Conditioner::Pqt {
                ct_pos,
                xray_pos,
                pqt,
            }
        } else {
            Conditioner::Bypass(FeatureBypass::new(
                &mut store.builder(&mut rng, ParamGroup::Transformer, "bypass"),
                &config.encoder.channels,
                config.views(),
                cond_channels,
            )?)
        };
        let unet = UNet::new(
            &mut store.builder(&mut rng, ParamGroup::Denoiser, "unet"),
            &config.unet,
            cond_channels,
        )?;
        Ok(Model {
            config: config.clone(),
            store,
            encoder,
            conditioner,
            unet,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    /// Runs the shared encoder over both views in one batch.
    pub fn encode(&self, xrays: &XrayBatch) -> Result<XrayFeatures> {
        let expects_lat = self.config.mode == Mode::Biplanar;
        if xrays.lat.is_some() != expects_lat {
            return Err(Error::Config(format!(
                "model is {} but the X-ray batch is not",
                self.config.mode
            )));
        }
        let b = xrays.len();
        match &xrays.lat {
            None => Ok(XrayFeatures {
                pa: self.encoder.extract_features(&xrays.pa)?,
                lat: None,
            }),
            Some(lat) => {
                let both = self
                    .encoder
                    .extract_features(&Tensor::cat(&[&xrays.pa, lat], 0)?)?;
                Ok(XrayFeatures {
                    pa: both.narrow(0, b)?,
                    lat: Some(both.narrow(b, b)?),
                })
            }
        }
    }

    /// Condition maps for a batch of slices; `features` must hold one item
    /// per slice.
    pub fn conditions(
        &self,
        features: &XrayFeatures,
        slices: &[SliceSpec],
    ) -> Result<ConditionSet> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("no slices requested".into()))?;
        let (h, w) = (first.height, first.width);
        if slices.iter().any(|s| (s.height, s.width) != (h, w)) {
            return Err(Error::Shape(
                "slices in one batch must share their size".into(),
            ));
        }
        let tags = slices.iter().map(|s| (s.plane, s.index)).collect();
        let sizes = self.config.encoder.level_sizes(h, w);
        match &self.conditioner {
            Conditioner::Bypass(bypass) => {
                make_unconditioned_inputs(bypass, &features.pa, features.lat.as_ref(), &sizes, tags)
            }
            Conditioner::Pqt {
                ct_pos,
                xray_pos,
                pqt,
            } => {
                let grids = slices
                    .iter()
                    .map(slice_coord_grid)
                    .collect::<Result<Vec<_>>>()?;
                let p = ct_pos.embed(&grids, &sizes, self.dtype(), self.device())?;
                let (_, _, xh, xw) = features.pa.levels[0].dims4()?;
                let (xh, xw) = (xh * EncoderConfig::factor(0), xw * EncoderConfig::factor(0));
                let q_pa = xray_pos.embed(View::Pa, xh, xw, &sizes, self.dtype(), self.device())?;
                let q_lat = match features.lat {
                    Some(_) => Some(xray_pos.embed(
                        View::Lat,
                        xh,
                        xw,
                        &sizes,
                        self.dtype(),
                        self.device(),
                    )?),
                    None => None,
                };
                pqt.modulate(
                    &features.pa,
                    features.lat.as_ref(),
                    &p,
                    &q_pa,
                    q_lat.as_ref(),
                    tags,
                )
            }
        }
    }

    /// ε-prediction for noisy slices `x_t` of shape `(b, 1, H, W)`.
    pub fn predict(
        &self,
        x_t: &Tensor,
        t: &[usize],
        conditions: &ConditionSet,
        schedule: &NoiseSchedule,
    ) -> Result<Tensor> {
        let out = self.unet.predict_noise(x_t, t, conditions)?;
        match self.config.prediction {
            Prediction::Epsilon => Ok(out),
            Prediction::Velocity => {
                let ab = t
                    .iter()
                    .map(|&t| schedule.alpha_bar(t))
                    .collect::<Result<Vec<f64>>>()?;
                let shape = [t.len(), 1, 1, 1];
                let sa = tensor_from_f64(
                    ab.iter().map(|a| a.sqrt()).collect(),
                    &shape,
                    out.dtype(),
                    out.device(),
                )?;
                let sb = tensor_from_f64(
                    ab.iter().map(|a| (1.0 - a).sqrt()).collect(),
                    &shape,
                    out.dtype(),
                    out.device(),
                )?;
                Ok((out.broadcast_mul(&sa)? + x_t.broadcast_mul(&sb)?)?)
            }
        }
    }

    /// Copies every parameter value from `other` (same architecture).
    pub fn load_values_from(&self, other: &ParamStore) -> Result<()> {
        for (name, _, _) in self.store.iter() {
            self.store.set_values(name, other.values(name)?)?;
        }
        Ok(())
    }
}

/// `[0, 1]` image rows to `[-1, 1]` values, row-major.
pub(crate) fn to_signed(img: &Array2<f32>) -> Vec<f64> {
    img.iter().map(|&v| 2.0 * f64::from(v) - 1.0).collect()
}

/// Stacks `[0, 1]` slices into a `(b, 1, H, W)` tensor in `[-1, 1]`.
pub fn slices_to_tensor(slices: &[Array2<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = slices
        .first()
        .map(|s| s.dim())
        .ok_or_else(|| Error::Shape("no slices".into()))?;
    let mut values = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if s.dim() != (h, w) {
            return Err(Error::Shape("slices differ in size".into()));
        }
        values.extend(to_signed(s));
    }
    tensor_from_f64(values, &[slices.len(), 1, h, w], dtype, device)
}

/// Splits a `(b, 1, H, W)` tensor in `[-1, 1]` into `[0, 1]` slices (clamped).
pub fn tensor_to_slices(x: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, _, h, w) = x.dims4()?;
    let values = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let all = ndarray::Array3::from_shape_vec((b, h, w), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(all
        .axis_iter(Axis(0))
        .map(|s| s.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0) as f32))
        .collect())
}
