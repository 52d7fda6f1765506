//! Alternating discriminator / generator optimization over triplet batches.

mod checkpoint;
mod losslog;
mod step;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_FILES, CHECKPOINT_VERSION};
pub use losslog::{read_loss_log, LossLog, LOSS_LOG_HEADER};
pub use step::{
    discriminator_step, generator_forward, generator_terms, train_step, Batch, GeneratorPass, GeneratorTerms,
};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tashr_tensor::Real;

use crate::error::{Error, Result};
use crate::imaging::SampleTriplet;
use crate::losses::{FeatureProvider, LossBreakdown, ProviderSpec, TvMode};
use crate::nets::{ModelBundle, NetsConfig};
use crate::optim::AdamConfig;

/// Which frozen backbones the feature and text losses use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub perceptual: ProviderSpec,
    pub text_detection: ProviderSpec,
    pub text_recognition: ProviderSpec,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            perceptual: ProviderSpec::Random {
                seed: 101,
                widths: vec![8, 16, 32],
            },
            text_detection: ProviderSpec::Random {
                seed: 102,
                widths: vec![8, 16, 32],
            },
            text_recognition: ProviderSpec::Random {
                seed: 103,
                widths: vec![16],
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub image_size: usize,
    pub max_steps: u64,
    /// Checkpoint period in steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub tv_mode: TvMode,
    /// Stop gradients from the removal losses at the predicted mask.
    pub detach_mask: bool,
    pub text_loss_enabled: bool,
    pub nets: NetsConfig,
    pub losses: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            batch_size: 4,
            image_size: 512,
            max_steps: 100_000,
            checkpoint_every: 1000,
            seed: 0,
            tv_mode: TvMode::AsPrinted,
            detach_mask: true,
            text_loss_enabled: true,
            nets: NetsConfig::default(),
            losses: LossConfig::default(),
        }
    }
}

/// Side lengths must be a multiple of this.
pub const IMAGE_SIZE_MULTIPLE: usize = 64;

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.image_size == 0 || self.image_size % IMAGE_SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {IMAGE_SIZE_MULTIPLE}",
                self.image_size
            )));
        }
        self.adam().validate()?;
        self.nets.validate()
    }
}

/// The frozen backbones, built once per run.
#[derive(Clone, Debug)]
pub struct Providers<T> {
    pub perceptual: FeatureProvider<T>,
    pub text_detection: FeatureProvider<T>,
    pub text_recognition: FeatureProvider<T>,
}

impl<T: Real> Providers<T> {
    pub fn build(config: &LossConfig) -> Result<Self> {
        Ok(Self {
            perceptual: config.perceptual.build("perceptual")?,
            text_detection: config.text_detection.build("text_detection")?,
            text_recognition: config.text_recognition.build("text_recognition")?,
        })
    }
}

/// Sample order of one pass over `n` samples, shuffled by `seed` and `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Dataset indices of the batch used at `step`; epochs are consumed back to back.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    assert!(n > 0, "empty dataset");
    let start = step * batch_size as u64;
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for pos in start..start + batch_size as u64 {
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(seed, epoch, n)));
        }
        out.push(cached.as_ref().expect("just filled").1[(pos % n as u64) as usize]);
    }
    out
}

/// Model state plus everything needed to continue training it.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub bundle: ModelBundle<T>,
    pub providers: Providers<T>,
    /// Exponential average of the total generator loss.
    pub running_total: Option<f64>,
}

const RUNNING_DECAY: f64 = 0.99;

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::new(config.nets, config.seed)?;
        let providers = Providers::build(&config.losses)?;
        Ok(Self {
            config,
            bundle,
            providers,
            running_total: None,
        })
    }

    /// Continues from a saved checkpoint; its network layout must match `config`.
    pub fn resume(config: TrainConfig, dir: impl AsRef<Path>) -> Result<Self> {
        config.validate()?;
        let (bundle, meta) = load_checkpoint(dir)?;
        if bundle.config != config.nets {
            return Err(Error::Checkpoint(format!(
                "checkpoint networks {:?} differ from configured {:?}",
                bundle.config, config.nets
            )));
        }
        let providers = Providers::build(&config.losses)?;
        Ok(Self {
            config,
            bundle,
            providers,
            running_total: meta.running_total,
        })
    }

    pub fn step(&self) -> u64 {
        self.bundle.step
    }

    /// One optimization step on the batch the schedule assigns to the current step.
    pub fn train_on(&mut self, data: &[SampleTriplet]) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let idx = batch_indices(self.config.seed, self.bundle.step, self.config.batch_size, data.len());
        let samples: Vec<&SampleTriplet> = idx.iter().map(|&i| &data[i]).collect();
        let batch = Batch::from_triplets(&samples, self.config.image_size)?;
        let losses = train_step(&mut self.bundle, &self.providers, &self.config, &batch)?;
        self.running_total = Some(match self.running_total {
            None => losses.total,
            Some(r) => RUNNING_DECAY * r + (1.0 - RUNNING_DECAY) * losses.total,
        });
        Ok(losses)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(
            dir,
            &self.bundle,
            &CheckpointMeta::new(&self.bundle, self.running_total, Some(&self.config)),
        )
    }
}

/// Where a training run keeps its outputs.
pub struct RunLayout {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

impl RunLayout {
    pub fn new(out_dir: impl AsRef<Path>) -> Self {
        let d = out_dir.as_ref();
        Self {
            checkpoint: d.join("checkpoint"),
            loss_log: d.join("losses.csv"),
        }
    }
}

/// Trains to `config.max_steps`, checkpointing into `out_dir/checkpoint` and
/// appending to `out_dir/losses.csv`. With `resume`, continues from the
/// saved checkpoint and drops log rows written after it.
///
/// A failing step leaves the last saved checkpoint in place.
pub fn run_training(
    config: &TrainConfig,
    data: &[SampleTriplet],
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<Trainer<f32>> {
    let layout = RunLayout::new(&out_dir);
    let mut trainer = if resume {
        Trainer::resume(config.clone(), &layout.checkpoint)?
    } else {
        Trainer::new(config.clone())?
    };
    for s in data {
        if s.highlight.dims() != (config.image_size, config.image_size) {
            return Err(Error::Dataset(format!(
                "sample {} is {}x{}, training expects {}x{}",
                s.id,
                s.highlight.height(),
                s.highlight.width(),
                config.image_size,
                config.image_size
            )));
        }
    }
    let mut log = LossLog::open(&layout.loss_log, trainer.step())?;
    if !resume {
        trainer.save(&layout.checkpoint)?;
    }
    let started = Instant::now();
    while trainer.step() < config.max_steps {
        let losses = trainer.train_on(data)?;
        log.append(trainer.step(), &losses, started.elapsed().as_secs_f64())?;
        let s = trainer.step();
        if (config.checkpoint_every > 0 && s % config.checkpoint_every == 0) || s == config.max_steps {
            trainer.save(&layout.checkpoint)?;
            log::info!("step {s}: total {:.5} (checkpoint saved)", losses.total);
        }
    }
    Ok(trainer)
}
