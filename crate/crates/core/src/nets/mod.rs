//! The detection net, the removal net and the spectrally normalized patch
//! discriminator, plus the bundle that holds all of their state.

mod detection;
mod discriminator;
mod params;
mod removal;

pub use detection::{DetectionNetConfig, DETECTION_LEVELS};
pub use discriminator::{
    power_iteration, sigma_estimate, spectral_normalize, DiscriminatorConfig, SpectralState, DISCRIMINATOR_KERNEL,
    LEAKY_SLOPE, SCORE_STRIDE,
};
pub use params::{init_layers, BoundParams, ConvSpec, ParamSet, INSTANCE_NORM_EPS};
pub use removal::{RemovalNetConfig, RESIDUAL_BLOCKS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tashr_tensor::{Real, Tape, Tensor};

use crate::error::{Error, Result};
use crate::imaging::{ImageRgb, MaskMap};
use crate::optim::AdamState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetsConfig {
    pub detection: DetectionNetConfig,
    pub removal: RemovalNetConfig,
    pub discriminator: DiscriminatorConfig,
}

impl NetsConfig {
    /// Every network at the same width.
    pub fn uniform(base_channels: usize) -> Self {
        Self {
            detection: DetectionNetConfig { base_channels },
            removal: RemovalNetConfig { base_channels },
            discriminator: DiscriminatorConfig { base_channels },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("detection", self.detection.base_channels),
            ("removal", self.removal.base_channels),
            ("discriminator", self.discriminator.base_channels),
        ] {
            if b == 0 {
                return Err(Error::Config(format!("{name} base_channels must be positive")));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_rgb_batch(shape: &[usize], channels: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != channels || shape[0] == 0 {
        return Err(Error::Tensor(tashr_tensor::TensorError::Rank {
            expected: 4,
            shape: shape.to_vec(),
        }));
    }
    Ok(())
}

pub(crate) fn check_divisible(shape: &[usize], multiple: usize) -> Result<()> {
    let (h, w) = (shape[2], shape[3]);
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::NotDivisible {
            height: h,
            width: w,
            multiple,
        });
    }
    Ok(())
}

/// Stacks same-sized images into `[N,3,H,W]`.
pub fn images_to_tensor<T: Real>(images: &[&ImageRgb]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(tashr_tensor::TensorError::Empty)?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::DimensionMismatch {
                left_h: h,
                left_w: w,
                right_h: img.height(),
                right_w: img.width(),
            });
        }
        data.extend(img.planar().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), 3, h, w], data)?)
}

/// Stacks same-sized masks into `[N,1,H,W]`.
pub fn masks_to_tensor<T: Real>(masks: &[&MaskMap]) -> Result<Tensor<T>> {
    let first = masks.first().ok_or(tashr_tensor::TensorError::Empty)?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::DimensionMismatch {
                left_h: h,
                left_w: w,
                right_h: m.height(),
                right_w: m.width(),
            });
        }
        data.extend(m.values().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Ok(Tensor::new(&[masks.len(), 1, h, w], data)?)
}

pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Result<Vec<ImageRgb>> {
    let (n, c, h, w) = t.dims4()?;
    check_rgb_batch(t.shape(), 3)?;
    let plane = c * h * w;
    (0..n)
        .map(|i| {
            let data = t.data()[i * plane..(i + 1) * plane].iter().map(|v| v.to_f64_lossy() as f32).collect();
            ImageRgb::from_planar(h, w, data)
        })
        .collect()
}

pub fn tensor_to_masks<T: Real>(t: &Tensor<T>) -> Result<Vec<MaskMap>> {
    let (n, _, h, w) = t.dims4()?;
    check_rgb_batch(t.shape(), 1)?;
    (0..n)
        .map(|i| {
            let data = t.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.to_f64_lossy() as f32).collect();
            MaskMap::from_values(h, w, data)
        })
        .collect()
}

/// Parameters, optimizer moments, spectral vectors and step count of the
/// whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: NetsConfig,
    pub detection: ParamSet<T>,
    pub removal: ParamSet<T>,
    pub discriminator: ParamSet<T>,
    pub spectral: SpectralState<T>,
    pub detection_opt: AdamState<T>,
    pub removal_opt: AdamState<T>,
    pub discriminator_opt: AdamState<T>,
    pub step: u64,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl<T: Real> ModelBundle<T> {
    /// Fresh seeded initialization.
    pub fn new(config: NetsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let detection = config.detection.init(&mut stream(seed, 1));
        let removal = config.removal.init(&mut stream(seed, 2));
        let discriminator = config.discriminator.init(&mut stream(seed, 3));
        let spectral = SpectralState::init(&discriminator, &mut stream(seed, 4));
        Ok(Self {
            config,
            detection_opt: AdamState::new(&detection),
            removal_opt: AdamState::new(&removal),
            discriminator_opt: AdamState::new(&discriminator),
            detection,
            removal,
            discriminator,
            spectral,
            step: 0,
        })
    }

    /// Name of the first non-finite parameter tensor, prefixed by its network.
    pub fn first_non_finite(&self) -> Option<String> {
        [
            ("detection", &self.detection),
            ("removal", &self.removal),
            ("discriminator", &self.discriminator),
        ]
        .into_iter()
        .find_map(|(net, p)| p.first_non_finite().map(|n| format!("{net}.{n}")))
    }

    fn ensure_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some(name) => Err(Error::NonFinite(format!("parameter {name}"))),
            None => Ok(()),
        }
    }

    /// Mask probabilities for a `[N,3,H,W]` batch.
    pub fn detect_tensor(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.ensure_finite()?;
        let tape = Tape::new();
        let p = self.detection.bind(&tape, false);
        let out = self.config.detection.forward(&p, tape.constant(images.clone()))?;
        let v = (*out.value()).clone();
        Ok(v)
    }

    /// Highlight-free images for a `[N,3,H,W]` batch and `[N,1,H,W]` masks.
    pub fn remove_tensor(&self, images: &Tensor<T>, masks: &Tensor<T>) -> Result<Tensor<T>> {
        self.ensure_finite()?;
        let tape = Tape::new();
        let p = self.removal.bind(&tape, false);
        let out = self
            .config
            .removal
            .forward(&p, tape.constant(images.clone()), tape.constant(masks.clone()))?;
        let v = (*out.value()).clone();
        Ok(v)
    }

    /// Patch scores for a `[N,3,H,W]` batch, without touching the spectral vectors.
    pub fn discriminate_tensor(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.ensure_finite()?;
        let tape = Tape::new();
        let p = self.discriminator.bind(&tape, false);
        let out = self
            .config
            .discriminator
            .forward(&p, &self.spectral, tape.constant(images.clone()))?;
        let v = (*out.value()).clone();
        Ok(v)
    }

    pub fn detect(&self, images: &[&ImageRgb]) -> Result<Vec<MaskMap>> {
        tensor_to_masks(&self.detect_tensor(&images_to_tensor(images)?)?)
    }

    pub fn remove(&self, images: &[&ImageRgb], masks: &[&MaskMap]) -> Result<Vec<ImageRgb>> {
        tensor_to_images(&self.remove_tensor(&images_to_tensor(images)?, &masks_to_tensor(masks)?)?)
    }
}
