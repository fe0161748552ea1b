use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::optim::{Adam, AdamConfig};
use super::sample::SamplerConfig;
use super::{training_loss, NoiseSchedule, ScheduleConfig, TrainBatch};
use crate::error::{Error, Result};
use crate::geometry::{Plane, SliceSpec};
use crate::model::{slices_to_tensor, Model, ModelConfig, XrayBatch};
use crate::phantom::{slice_volume, Mode};
use crate::phantom::{DatasetManifest, Sample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Number of optimizer steps.
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub adam: AdamConfig,
    /// Seeds both parameter initialization and the data/noise stream.
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 1000,
            batch_size: 4,
            learning_rate: 5e-5,
            lr_schedule: LrSchedule::Constant,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

/// Learning-rate shape over the `steps` of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` towards zero at `steps`.
    Cosine,
}

impl TrainerConfig {
    /// Learning rate used for the update that completes step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = (step.saturating_sub(1) as f64 / self.steps.max(1) as f64).min(1.0);
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "batch size and learning rate must be positive".into(),
            ));
        }
        self.adam.validate()
    }
}

/// Everything a training run or a sampler needs, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub trainer: TrainerConfig,
    pub sampler: SamplerConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        NoiseSchedule::new(&self.schedule)?;
        self.trainer.validate()?;
        self.sampler.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Minibatch trainer over a fixed set of samples.
#[derive(Debug)]
pub struct Trainer {
    config: PipelineConfig,
    model: Model,
    adam: Adam,
    schedule: NoiseSchedule,
    rng: ChaCha8Rng,
    step: u64,
    samples: Vec<Sample>,
    resolution: usize,
}

/// Stream of the data/noise generator; stream 0 of the same seed feeds
/// parameter initialization.
pub(crate) const DATA_STREAM: u64 = 1;

impl Trainer {
    pub fn new(config: &PipelineConfig, samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, config.trainer.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
        rng.set_stream(DATA_STREAM);
        let adam = Adam::new(config.trainer.adam)?;
        Self::assemble(config.clone(), model, adam, rng, 0, samples)
    }

    /// Continues a run from a checkpoint; subsequent steps reproduce the
    /// uninterrupted run exactly.
    pub fn resume(checkpoint: &Checkpoint, samples: Vec<Sample>) -> Result<Self> {
        let (model, adam, rng) = checkpoint.restore()?;
        Self::assemble(
            checkpoint.config.clone(),
            model,
            adam,
            rng,
            checkpoint.step,
            samples,
        )
    }

    fn assemble(
        config: PipelineConfig,
        model: Model,
        adam: Adam,
        rng: ChaCha8Rng,
        step: u64,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("no training samples".into()))?;
        let [d, h, w] = first.volume.shape();
        if d != h || h != w {
            return Err(Error::Config(format!(
                "training volumes must be cubic, got {d}x{h}x{w}"
            )));
        }
        config.model.check_resolution(d)?;
        let samples = samples
            .into_iter()
            .map(|s| {
                if s.volume.shape() != [d, d, d] || s.xrays.dim() != (d, d) {
                    return Err(Error::Config(
                        "all training samples must share one resolution".into(),
                    ));
                }
                let xrays = match (config.model.mode, s.xrays.mode()) {
                    (Mode::Biplanar, Mode::Monoplanar) => {
                        return Err(Error::Config(
                            "biplanar model needs lateral views in the data".into(),
                        ))
                    }
                    (Mode::Monoplanar, Mode::Biplanar) => s.xrays.to_monoplanar(),
                    _ => s.xrays,
                };
                Ok(Sample {
                    volume: s.volume,
                    xrays,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let schedule = NoiseSchedule::new(&config.schedule)?;
        Ok(Trainer {
            config,
            model,
            adam,
            schedule,
            rng,
            step,
            samples,
            resolution: d,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Draws `(sample, plane, slice)` uniformly for every batch item.
    pub fn draw_batch(&mut self) -> Result<TrainBatch> {
        let r = self.resolution;
        let mut slices = Vec::new();
        let mut images = Vec::new();
        let mut sets = Vec::new();
        for _ in 0..self.config.trainer.batch_size {
            let i = self.rng.random_range(0..self.samples.len());
            let plane = Plane::ALL[self.rng.random_range(0..3)];
            let n = self.rng.random_range(1..=r);
            images.push(slice_volume(&self.samples[i].volume, plane, n)?);
            slices.push(SliceSpec::new(plane, n, r, r, r)?);
            sets.push(i);
        }
        let refs: Vec<_> = sets.iter().map(|&i| &self.samples[i].xrays).collect();
        let (dtype, device) = (self.model.dtype(), self.model.device().clone());
        Ok(TrainBatch {
            x0: slices_to_tensor(&images, dtype, &device)?,
            xrays: XrayBatch::from_sets(&refs, dtype, &device)?,
            slices,
        })
    }

    /// One optimizer update; returns the minibatch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let next = self.step + 1;
        let batch = self.draw_batch()?;
        let loss = training_loss(&self.model, &batch, &self.schedule, &mut self.rng).map_err(
            |e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("training diverged at step {next}: {msg}"))
                }
                other => other,
            },
        )?;
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        self.adam
            .step(self.model.params(), &grads, self.config.trainer.lr_at(next))?;
        self.step = next;
        Ok(value)
    }

    /// Runs until `steps` total steps are done, logging one JSON line per
    /// step and writing periodic checkpoints to `checkpoint_path`.
    pub fn run(
        &mut self,
        steps: u64,
        mut log: Option<&mut dyn Write>,
        checkpoint_path: Option<&Path>,
    ) -> Result<Vec<StepRecord>> {
        let start = Instant::now();
        let mut records = Vec::new();
        let every = self.config.trainer.checkpoint_every;
        while self.step < steps {
            let loss = self.step()?;
            let record = StepRecord {
                step: self.step,
                loss,
                lr: self.config.trainer.lr_at(self.step),
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if let Some(w) = log.as_deref_mut() {
                let line =
                    serde_json::to_string(&record).map_err(|e| Error::Numeric(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::io(Path::new("<training log>"), e))?;
            }
            records.push(record);
            if let Some(path) = checkpoint_path {
                if every > 0 && self.step.is_multiple_of(every) {
                    save_checkpoint(&self.checkpoint()?, path)?;
                }
            }
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.config, &self.model, &self.adam, self.step, &self.rng)
    }
}

/// Trains on every sample of `manifest` for `config.trainer.steps` steps and
/// writes the final checkpoint to `out`.
pub fn train(
    manifest: &DatasetManifest,
    config: &PipelineConfig,
    out: &Path,
    log: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config, manifest.load_samples()?)?;
    trainer.run(config.trainer.steps, log, Some(out))?;
    let checkpoint = trainer.checkpoint()?;
    save_checkpoint(&checkpoint, out)?;
    Ok(checkpoint)
}
