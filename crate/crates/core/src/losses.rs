//! Training objectives and the frozen feature extractors they compare in.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tashr_tensor::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nets::{ConvSpec, ParamSet};

pub const DETECTION_WEIGHT: f64 = 10.0;
pub const ADVERSARIAL_WEIGHT: f64 = 0.01;
pub const PIXEL_L1_WEIGHT: f64 = 5.0;
pub const PIXEL_SHIFT_WEIGHT: f64 = 0.1;
pub const PERCEPTUAL_WEIGHT: f64 = 0.05;
pub const STYLE_WEIGHT: f64 = 120.0;

/// What the shifted terms of the pixel loss compare the output against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvMode {
    /// Output at `(i, j)` against the target at `(i-1, j)` and `(i, j-1)`.
    #[default]
    AsPrinted,
    /// Output at `(i, j)` against the output itself, shifted.
    SelfShift,
}

/// One step of a backbone, in the order of torchvision's `features` list.
#[derive(Clone, Debug, PartialEq)]
pub enum BackboneLayer {
    Conv(ConvSpec),
    Relu,
    MaxPool,
}

/// A frozen convnet whose intermediate activations are compared by losses.
///
/// Weights are bound as tape constants, so gradients reach the input but
/// never the provider.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProvider<T> {
    name: String,
    layers: Vec<BackboneLayer>,
    taps: Vec<usize>,
    weights: ParamSet<T>,
    /// Per-channel `(mean, std)` applied before the first layer.
    input_norm: Option<([f64; 3], [f64; 3])>,
}

/// Layer list of the VGG-16 feature extractor; `None` marks a max pool.
const VGG16_WIDTHS: [Option<usize>; 18] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
];

/// Post-activation outputs closing the 2nd, 3rd and 4th VGG-16 stages.
pub const VGG16_DEFAULT_TAPS: [usize; 3] = [8, 15, 22];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn vgg16_layers() -> Vec<BackboneLayer> {
    let mut layers = Vec::new();
    let mut cin = 3;
    for w in VGG16_WIDTHS {
        match w {
            Some(w) => {
                let i = layers.len();
                layers.push(BackboneLayer::Conv(ConvSpec::new(format!("features.{i}"), cin, w, 3, 1, false)));
                layers.push(BackboneLayer::Relu);
                cin = w;
            }
            None => layers.push(BackboneLayer::MaxPool),
        }
    }
    layers
}

impl<T: Real> FeatureProvider<T> {
    fn build(
        name: impl Into<String>,
        layers: Vec<BackboneLayer>,
        taps: Vec<usize>,
        weights: ParamSet<T>,
        input_norm: Option<([f64; 3], [f64; 3])>,
    ) -> Result<Self> {
        let name = name.into();
        if taps.is_empty() || taps.windows(2).any(|w| w[0] >= w[1]) || taps.iter().any(|&t| t >= layers.len()) {
            return Err(Error::Config(format!(
                "provider {name}: taps {taps:?} must be increasing indices below {}",
                layers.len()
            )));
        }
        let mut expected = ParamSet::<T>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for l in &layers {
            if let BackboneLayer::Conv(c) = l {
                c.init(&mut rng, &mut expected);
            }
        }
        expected
            .check_layout(&weights, &format!("provider {name}"))
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            name,
            layers,
            taps,
            weights,
            input_norm,
        })
    }

    /// VGG-16 with weights keyed `features.{i}.weight` / `features.{i}.bias`.
    pub fn vgg16(name: impl Into<String>, weights: ParamSet<T>, taps: Vec<usize>) -> Result<Self> {
        let mut layers = vgg16_layers();
        let last = taps.last().copied().unwrap_or(0);
        layers.truncate(last + 1);
        let keep: Vec<String> = layers
            .iter()
            .filter_map(|l| match l {
                BackboneLayer::Conv(c) => Some(c.name.clone()),
                _ => None,
            })
            .collect();
        let mut trimmed = ParamSet::new();
        for (n, t) in weights.iter() {
            if keep.iter().any(|k| n.strip_prefix(k.as_str()).is_some_and(|r| r.starts_with('.'))) {
                trimmed.insert(n.clone(), t.clone());
            }
        }
        Self::build(name, layers, taps, trimmed, Some((IMAGENET_MEAN, IMAGENET_STD)))
    }

    pub fn load_vgg16(name: impl Into<String>, path: &std::path::Path, taps: Vec<usize>) -> Result<Self> {
        let mut weights = ParamSet::new();
        for (n, t) in crate::tensorio::read_tensors::<T>(path)? {
            weights.insert(n, t);
        }
        Self::vgg16(name, weights, taps)
    }

    /// Seeded random convnet: per width a 3x3 conv and a ReLU, with a max
    /// pool between stages. Every stage's activation is a tap.
    pub fn random(name: impl Into<String>, seed: u64, widths: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            if i > 0 {
                layers.push(BackboneLayer::MaxPool);
            }
            let idx = layers.len();
            layers.push(BackboneLayer::Conv(ConvSpec::new(format!("features.{idx}"), cin, w, 3, 1, false)));
            layers.push(BackboneLayer::Relu);
            taps.push(layers.len() - 1);
            cin = w;
        }
        Self::seeded(name, seed, layers, taps)
    }

    /// Seeded random stack of 1x1 convs and ReLUs, one tap per width.
    /// Commutes with any permutation of pixel positions.
    pub fn pointwise(name: impl Into<String>, seed: u64, widths: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut cin = 3;
        for &w in widths {
            let idx = layers.len();
            layers.push(BackboneLayer::Conv(ConvSpec::new(format!("features.{idx}"), cin, w, 1, 1, false)));
            layers.push(BackboneLayer::Relu);
            taps.push(layers.len() - 1);
            cin = w;
        }
        Self::seeded(name, seed, layers, taps)
    }

    fn seeded(name: impl Into<String>, seed: u64, layers: Vec<BackboneLayer>, taps: Vec<usize>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = ParamSet::new();
        for l in &layers {
            if let BackboneLayer::Conv(c) = l {
                c.init(&mut rng, &mut weights);
                // nonzero biases so that ReLUs are not all centered at zero
                let b = weights.get_mut(&c.bias_name()).expect("bias just inserted");
                let n = b.len();
                *b = Tensor::from_fn(&[n], |i| T::from_f64_lossy(0.05 * ((i % 5) as f64 - 2.0)));
            }
        }
        Self::build(name, layers, taps, weights, None)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }

    pub fn weights(&self) -> &ParamSet<T> {
        &self.weights
    }

    /// Activations at every tap for a `[N,3,H,W]` batch.
    pub fn extract<'t>(&self, tape: &'t Tape<T>, image: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let p = self.weights.bind(tape, false);
        let mut x = image;
        if let Some((mean, std)) = self.input_norm {
            let w = Tensor::from_fn(&[3, 3, 1, 1], |i| {
                if i / 3 == i % 3 {
                    T::from_f64_lossy(1.0 / std[i / 3])
                } else {
                    T::zero()
                }
            });
            let b = Tensor::from_fn(&[3], |c| T::from_f64_lossy(-mean[c] / std[c]));
            x = x.conv2d(tape.constant(w), Some(tape.constant(b)), 1, 0)?;
        }
        let mut out = Vec::with_capacity(self.taps.len());
        let mut next_tap = self.taps.iter().peekable();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                BackboneLayer::Conv(c) => c.apply(&p, x)?,
                BackboneLayer::Relu => x.relu(),
                BackboneLayer::MaxPool => x.max_pool2x2()?,
            };
            if next_tap.peek() == Some(&&i) {
                out.push(x);
                next_tap.next();
            }
            if next_tap.peek().is_none() {
                break;
            }
        }
        Ok(out)
    }
}

/// How to build a feature provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    /// Pretrained VGG-16 features from a safetensors file.
    Vgg16 { weights: PathBuf, taps: Vec<usize> },
    /// Seeded random 3x3 convnet.
    Random { seed: u64, widths: Vec<usize> },
    /// Seeded random 1x1 convnet.
    Pointwise { seed: u64, widths: Vec<usize> },
}

impl ProviderSpec {
    pub fn build<T: Real>(&self, name: &str) -> Result<FeatureProvider<T>> {
        match self {
            ProviderSpec::Vgg16 { weights, taps } => FeatureProvider::load_vgg16(name, weights, taps.clone()),
            ProviderSpec::Random { seed, widths } => FeatureProvider::random(name, *seed, widths),
            ProviderSpec::Pointwise { seed, widths } => FeatureProvider::pointwise(name, *seed, widths),
        }
    }
}

/// Mean absolute difference of two same-shaped tensors.
pub fn detection_loss<'t, T: Real>(mask_out: Var<'t, T>, mask_gt: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(mask_out.mean_abs_diff(mask_gt)?)
}

/// `5·|out − gt| + 0.1·(|out(i,j) − ref(i−1,j)| + |out(i,j) − ref(i,j−1)|)`,
/// where `ref` is the target or the output itself depending on `mode`.
pub fn pixel_loss<'t, T: Real>(out: Var<'t, T>, gt: Var<'t, T>, mode: TvMode) -> Result<Var<'t, T>> {
    let l1 = out.mean_abs_diff(gt)?;
    let reference = match mode {
        TvMode::AsPrinted => gt,
        TvMode::SelfShift => out,
    };
    let down = out.mean_abs_diff_shifted(reference, 1, 0)?;
    let right = out.mean_abs_diff_shifted(reference, 0, 1)?;
    Ok(l1
        .scale(T::from_f64_lossy(PIXEL_L1_WEIGHT))
        .add(down.add(right)?.scale(T::from_f64_lossy(PIXEL_SHIFT_WEIGHT)))?)
}

/// Channel correlations `F·Fᵀ/(C·H·W)` of `[N,C,H,W]` features, `[N,C,C]`.
pub fn gram<'t, T: Real>(features: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(features.gram()?)
}

fn sum_vars<'t, T: Real>(tape: &'t Tape<T>, terms: impl IntoIterator<Item = Var<'t, T>>) -> Result<Var<'t, T>> {
    let mut acc = tape.constant(Tensor::scalar(T::zero()));
    for t in terms {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

/// Perceptual plus style distance over every tap of `provider`.
pub fn feature_loss<'t, T: Real>(out: Var<'t, T>, gt: Var<'t, T>, provider: &FeatureProvider<T>) -> Result<Var<'t, T>> {
    let tape = out.tape();
    let fo = provider.extract(tape, out)?;
    let fg = provider.extract(tape, gt.detach())?;
    let mut perceptual = Vec::new();
    let mut style = Vec::new();
    for (a, b) in fo.into_iter().zip(fg) {
        perceptual.push(a.mean_abs_diff(b)?);
        style.push(a.gram()?.mean_abs_diff(b.gram()?)?);
    }
    Ok(sum_vars(tape, perceptual)?
        .scale(T::from_f64_lossy(PERCEPTUAL_WEIGHT))
        .add(sum_vars(tape, style)?.scale(T::from_f64_lossy(STYLE_WEIGHT)))?)
}

/// `E[max(0, 1 − real)] + E[max(0, 1 + fake)]`.
pub fn gan_discriminator_loss<'t, T: Real>(real: Var<'t, T>, fake: Var<'t, T>) -> Result<Var<'t, T>> {
    let one = T::one();
    let r = real.affine(-one, one).relu().mean_all();
    let f = fake.affine(one, one).relu().mean_all();
    Ok(r.add(f)?)
}

/// `−E[fake]`.
pub fn gan_generator_loss<'t, T: Real>(fake: Var<'t, T>) -> Var<'t, T> {
    fake.mean_all().scale(-T::one())
}

/// `(generator, discriminator)` hinge losses.
pub fn gan_losses<'t, T: Real>(real: Var<'t, T>, fake: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if real.shape() != fake.shape() {
        return Err(Error::Tensor(tashr_tensor::TensorError::Shape {
            left: real.shape(),
            right: fake.shape(),
        }));
    }
    Ok((gan_generator_loss(fake), gan_discriminator_loss(real, fake)?))
}

/// Summed feature distances under a three-tap detection backbone and a
/// one-tap recognition backbone.
pub fn text_loss<'t, T: Real>(
    out: Var<'t, T>,
    gt: Var<'t, T>,
    detection: &FeatureProvider<T>,
    recognition: &FeatureProvider<T>,
) -> Result<Var<'t, T>> {
    if detection.tap_count() != 3 || recognition.tap_count() != 1 {
        return Err(Error::Config(format!(
            "text providers need 3 and 1 taps, got {} ({}) and {} ({})",
            detection.tap_count(),
            detection.name(),
            recognition.tap_count(),
            recognition.name()
        )));
    }
    let tape = out.tape();
    let mut terms = Vec::new();
    for provider in [detection, recognition] {
        let fo = provider.extract(tape, out)?;
        let fg = provider.extract(tape, gt.detach())?;
        for (a, b) in fo.into_iter().zip(fg) {
            terms.push(a.mean_abs_diff(b)?);
        }
    }
    sum_vars(tape, terms)
}

/// Loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_netd: f64,
    pub l_pixel: f64,
    pub l_feature: f64,
    pub l_gan_g: f64,
    pub l_text: f64,
    pub total: f64,
    pub l_gan_d: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 7] = ["l_netd", "l_pixel", "l_feature", "l_gan_g", "l_text", "total", "l_gan_d"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.l_netd,
            self.l_pixel,
            self.l_feature,
            self.l_gan_g,
            self.l_text,
            self.total,
            self.l_gan_d,
        ]
    }
}

/// Generator-side weighting `10·netd + pixel + feature + 0.01·gan_g + text`.
pub fn weighted_total(l_netd: f64, l_pixel: f64, l_feature: f64, l_gan_g: f64, l_text: f64) -> f64 {
    DETECTION_WEIGHT * l_netd + l_pixel + l_feature + ADVERSARIAL_WEIGHT * l_gan_g + l_text
}

/// Combines finite loss parts; a non-finite part is an error naming it.
pub fn total_loss(l_netd: f64, l_pixel: f64, l_feature: f64, l_gan_g: f64, l_text: f64, l_gan_d: f64) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_netd", l_netd),
        ("l_pixel", l_pixel),
        ("l_feature", l_feature),
        ("l_gan_g", l_gan_g),
        ("l_text", l_text),
        ("l_gan_d", l_gan_d),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        l_netd,
        l_pixel,
        l_feature,
        l_gan_g,
        l_text,
        total: weighted_total(l_netd, l_pixel, l_feature, l_gan_g, l_text),
        l_gan_d,
    })
}

/// The same weighting on the tape; `text` is skipped when absent.
pub fn weighted_total_var<'t, T: Real>(
    netd: Var<'t, T>,
    pixel: Var<'t, T>,
    feature: Var<'t, T>,
    gan_g: Var<'t, T>,
    text: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let mut total = netd
        .scale(T::from_f64_lossy(DETECTION_WEIGHT))
        .add(pixel)?
        .add(feature)?
        .add(gan_g.scale(T::from_f64_lossy(ADVERSARIAL_WEIGHT)))?;
    if let Some(t) = text {
        total = total.add(t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant<'t>(tape: &'t Tape<f64>, shape: &[usize], v: f64) -> Var<'t, f64> {
        tape.constant(Tensor::full(shape, v))
    }

    #[test]
    fn detection_examples() {
        let tape = Tape::new();
        let a = constant(&tape, &[1, 1, 4, 4], 1.0);
        let b = constant(&tape, &[1, 1, 4, 4], 0.0);
        assert_eq!(detection_loss(a, b).unwrap().value().item(), 1.0);
        assert_eq!(detection_loss(a, a).unwrap().value().item(), 0.0);
        let c = constant(&tape, &[1, 1, 4, 4], 0.25);
        let d = constant(&tape, &[1, 1, 4, 4], 0.75);
        assert_eq!(detection_loss(c, d).unwrap().value().item(), 0.5);
    }

    #[test]
    fn pixel_examples() {
        let tape = Tape::new();
        let a = constant(&tape, &[1, 3, 4, 4], 0.4);
        assert_eq!(pixel_loss(a, a, TvMode::AsPrinted).unwrap().value().item(), 0.0);
        let b = constant(&tape, &[1, 3, 4, 4], 0.5);
        approx::assert_abs_diff_eq!(pixel_loss(b, a, TvMode::AsPrinted).unwrap().value().item(), 0.52, epsilon = 1e-12);
        // identical non-constant images leave the cross-shift residual
        let g = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 0.2, 0.4, 0.6]).unwrap());
        let v = pixel_loss(g, g, TvMode::AsPrinted).unwrap().value().item();
        // down pairs |0.4-0|,|0.6-0.2| mean 0.4; right pairs |0.2-0|,|0.6-0.4| mean 0.2
        approx::assert_abs_diff_eq!(v, 0.1 * (0.4 + 0.2), epsilon = 1e-12);
        let s = pixel_loss(g, g, TvMode::SelfShift).unwrap().value().item();
        approx::assert_abs_diff_eq!(s, 0.1 * (0.4 + 0.2), epsilon = 1e-12);
    }

    #[test]
    fn gram_examples() {
        let tape = Tape::new();
        let ones = constant(&tape, &[1, 1, 2, 2], 1.0);
        assert_eq!(gram(ones).unwrap().value().data(), &[1.0]);
        let pair = tape.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let g = gram(pair).unwrap().value();
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[2], 0.0);
        let zeros = constant(&tape, &[1, 3, 2, 2], 0.0);
        assert!(gram(zeros).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hinge_examples() {
        let tape = Tape::new();
        let z = constant(&tape, &[2, 1, 2, 2], 0.0);
        let (g, d) = gan_losses(z, z).unwrap();
        assert_eq!((g.value().item(), d.value().item()), (0.0, 2.0));
        let (g, d) = gan_losses(constant(&tape, &[2, 1, 2, 2], 2.0), constant(&tape, &[2, 1, 2, 2], -2.0)).unwrap();
        assert_eq!((g.value().item(), d.value().item()), (2.0, 0.0));
        assert_eq!(gan_generator_loss(constant(&tape, &[1, 1, 1, 1], 3.0)).value().item(), -3.0);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap().total, 0.0);
        approx::assert_abs_diff_eq!(total_loss(1.0, 1.0, 1.0, 1.0, 1.0, 0.0).unwrap().total, 13.01, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(total_loss(0.0, 0.0, 0.0, -3.0, 0.0, 0.0).unwrap().total, -0.03, epsilon = 1e-12);
        let err = total_loss(0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0).unwrap_err();
        assert!(err.to_string().contains("l_pixel"));
    }

    #[test]
    fn text_loss_checks_tap_counts() {
        let tape = Tape::new();
        let x = constant(&tape, &[1, 3, 8, 8], 0.3);
        let three = FeatureProvider::<f64>::random("det", 1, &[4, 4, 4]).unwrap();
        let one = FeatureProvider::<f64>::random("rec", 2, &[4]).unwrap();
        assert_eq!(text_loss(x, x, &three, &one).unwrap().value().item(), 0.0);
        assert!(matches!(text_loss(x, x, &one, &one), Err(Error::Config(_))));
    }

    #[test]
    fn vgg16_layout_and_taps() {
        let layers = vgg16_layers();
        assert_eq!(layers.len(), 31);
        for (i, l) in layers.iter().enumerate() {
            let conv = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28].contains(&i);
            let pool = [4, 9, 16, 23, 30].contains(&i);
            match l {
                BackboneLayer::Conv(c) => assert!(conv && c.name == format!("features.{i}")),
                BackboneLayer::MaxPool => assert!(pool),
                BackboneLayer::Relu => assert!(!conv && !pool),
            }
        }
        for t in VGG16_DEFAULT_TAPS {
            assert_eq!(layers[t], BackboneLayer::Relu);
            assert_eq!(layers[t + 1], BackboneLayer::MaxPool);
        }
    }
}
