use tashr_tensor::{Real, Tape, Tensor, Var};

use super::{Providers, TrainConfig};
use crate::error::{Error, Result};
use crate::imaging::SampleTriplet;
use crate::losses::{
    detection_loss, feature_loss, gan_discriminator_loss, gan_generator_loss, pixel_loss, text_loss, total_loss,
    weighted_total_var, LossBreakdown, TvMode,
};
use crate::nets::{images_to_tensor, masks_to_tensor, BoundParams, ModelBundle, ParamSet};

/// Stacked highlight, clean and mask tensors of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub highlight: Tensor<T>,
    pub clean: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn from_triplets(samples: &[&SampleTriplet], size: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.highlight.dims() != (size, size)) {
            return Err(Error::Dataset(format!(
                "sample {} is {}x{}, expected {size}x{size}",
                s.id,
                s.highlight.height(),
                s.highlight.width()
            )));
        }
        let hs: Vec<_> = samples.iter().map(|s| &s.highlight).collect();
        let cs: Vec<_> = samples.iter().map(|s| &s.clean).collect();
        let ms: Vec<_> = samples.iter().map(|s| &s.mask).collect();
        Ok(Self {
            highlight: images_to_tensor(&hs)?,
            clean: images_to_tensor(&cs)?,
            mask: masks_to_tensor(&ms)?,
        })
    }

    pub fn len(&self) -> usize {
        self.highlight.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Both generator networks on one tape.
pub struct GeneratorPass<'t, T> {
    pub detection: BoundParams<'t, T>,
    pub removal: BoundParams<'t, T>,
    pub mask_out: Var<'t, T>,
    pub image_out: Var<'t, T>,
}

pub fn generator_forward<'t, T: Real>(
    tape: &'t Tape<T>,
    bundle: &ModelBundle<T>,
    highlight: &Tensor<T>,
    detach_mask: bool,
) -> Result<GeneratorPass<'t, T>> {
    let detection = bundle.detection.bind(tape, true);
    let removal = bundle.removal.bind(tape, true);
    let input = tape.constant(highlight.clone());
    let mask_out = bundle.config.detection.forward(&detection, input)?;
    let mask_in = if detach_mask { mask_out.detach() } else { mask_out };
    let image_out = bundle.config.removal.forward(&removal, input, mask_in)?;
    Ok(GeneratorPass {
        detection,
        removal,
        mask_out,
        image_out,
    })
}

/// Generator-side loss terms, before weighting.
pub struct GeneratorTerms<'t, T> {
    pub netd: Var<'t, T>,
    pub pixel: Var<'t, T>,
    pub feature: Var<'t, T>,
    pub gan_g: Var<'t, T>,
    pub text: Option<Var<'t, T>>,
}

impl<'t, T: Real> GeneratorTerms<'t, T> {
    pub fn total(&self) -> Result<Var<'t, T>> {
        weighted_total_var(self.netd, self.pixel, self.feature, self.gan_g, self.text)
    }
}

/// Loss terms of a generator pass; the discriminator enters as constants.
pub fn generator_terms<'t, T: Real>(
    pass: &GeneratorPass<'t, T>,
    bundle: &ModelBundle<T>,
    providers: &Providers<T>,
    batch: &Batch<T>,
    tv_mode: TvMode,
    text_enabled: bool,
) -> Result<GeneratorTerms<'t, T>> {
    let tape = pass.image_out.tape();
    let clean = tape.constant(batch.clean.clone());
    let mask_gt = tape.constant(batch.mask.clone());
    let disc = bundle.discriminator.bind(tape, false);
    let fake = bundle
        .config
        .discriminator
        .forward(&disc, &bundle.spectral, pass.image_out)?;
    let text = if text_enabled {
        Some(text_loss(
            pass.image_out,
            clean,
            &providers.text_detection,
            &providers.text_recognition,
        )?)
    } else {
        None
    };
    Ok(GeneratorTerms {
        netd: detection_loss(pass.mask_out, mask_gt)?,
        pixel: pixel_loss(pass.image_out, clean, tv_mode)?,
        feature: feature_loss(pass.image_out, clean, &providers.perceptual)?,
        gan_g: gan_generator_loss(fake),
        text,
    })
}

fn check_grads<T: Real>(grads: &ParamSet<T>, net: &str) -> Result<()> {
    match grads.first_non_finite() {
        Some(name) => Err(Error::NonFinite(format!("gradient of {net}.{name}"))),
        None => Ok(()),
    }
}

/// Advances the spectral vectors, then takes one hinge-loss step on real
/// `clean` against generated `fake` images. Returns the discriminator loss.
pub fn discriminator_step<T: Real>(
    bundle: &mut ModelBundle<T>,
    config: &TrainConfig,
    clean: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<f64> {
    bundle.spectral.update(&bundle.discriminator)?;
    let tape = Tape::new();
    let params = bundle.discriminator.bind(&tape, true);
    let n = clean.shape()[0];
    let both = tape.constant(Tensor::cat0(&[clean, fake])?);
    let scores = bundle
        .config
        .discriminator
        .forward(&params, &bundle.spectral, both)?;
    let real = scores.narrow_batch(0, n)?;
    let generated = scores.narrow_batch(n, n)?;
    let loss = gan_discriminator_loss(real, generated)?;
    let value = loss.value().item().to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss term l_gan_d = {value}")));
    }
    let grads = params.gradients(&loss.backward()?);
    check_grads(&grads, "discriminator")?;
    bundle
        .discriminator_opt
        .step(&config.adam(), &mut bundle.discriminator, &grads)?;
    Ok(value)
}

/// One discriminator update followed by one generator update.
///
/// On error the bundle may hold a partially applied step and should be
/// discarded.
pub fn train_step<T: Real>(
    bundle: &mut ModelBundle<T>,
    providers: &Providers<T>,
    config: &TrainConfig,
    batch: &Batch<T>,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let pass = generator_forward(&tape, bundle, &batch.highlight, config.detach_mask)?;
    let fake = (*pass.image_out.value()).clone();
    let l_gan_d = discriminator_step(bundle, config, &batch.clean, &fake)?;

    let terms = generator_terms(&pass, bundle, providers, batch, config.tv_mode, config.text_loss_enabled)?;
    let scalar = |v: Var<'_, T>| v.value().item().to_f64_lossy();
    let losses = total_loss(
        scalar(terms.netd),
        scalar(terms.pixel),
        scalar(terms.feature),
        scalar(terms.gan_g),
        terms.text.map(scalar).unwrap_or(0.0),
        l_gan_d,
    )?;
    let total = terms.total()?;
    let grads = total.backward()?;
    let g_det = pass.detection.gradients(&grads);
    let g_rem = pass.removal.gradients(&grads);
    check_grads(&g_det, "detection")?;
    check_grads(&g_rem, "removal")?;
    let adam = config.adam();
    bundle.detection_opt.step(&adam, &mut bundle.detection, &g_det)?;
    bundle.removal_opt.step(&adam, &mut bundle.removal, &g_rem)?;
    bundle.step += 1;
    Ok(losses)
}
