use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tashr_tensor::{Real, Var};

use super::params::{init_layers, BoundParams, ConvSpec, ParamSet};
use super::{check_divisible, check_rgb_batch};
use crate::error::Result;

/// U-shaped mask predictor: three stride-2 stages down, three resize stages up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionNetConfig {
    pub base_channels: usize,
}

impl Default for DetectionNetConfig {
    fn default() -> Self {
        Self { base_channels: 32 }
    }
}

pub const DETECTION_LEVELS: usize = 3;

impl DetectionNetConfig {
    pub fn layers(&self) -> Vec<ConvSpec> {
        let b = self.base_channels;
        let widths = [b, 2 * b, 4 * b];
        let mut layers = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            let stage = format!("enc{}", i + 1);
            layers.push(ConvSpec::new(format!("{stage}.down"), cin, w, 3, 2, true));
            layers.push(ConvSpec::new(format!("{stage}.conv1"), w, w, 3, 1, true));
            layers.push(ConvSpec::new(format!("{stage}.conv2"), w, w, 3, 1, true));
            cin = w;
        }
        // decoder stage i goes to the resolution of encoder stage 2-i and
        // concatenates its output (the raw image for the last one)
        let targets = [(2 * b, 2 * b), (b, b), (b, 3)];
        for (i, &(w, skip)) in targets.iter().enumerate() {
            let stage = format!("dec{}", i + 1);
            layers.push(ConvSpec::new(format!("{stage}.up"), cin, w, 3, 1, true));
            layers.push(ConvSpec::new(format!("{stage}.conv1"), w + skip, w, 3, 1, true));
            layers.push(ConvSpec::new(format!("{stage}.conv2"), w, w, 3, 1, true));
            cin = w;
        }
        layers.push(ConvSpec::new("dec3.head", b, 1, 3, 1, false));
        layers
    }

    pub fn init<T: Real>(&self, rng: &mut ChaCha8Rng) -> ParamSet<T> {
        init_layers(&self.layers(), rng)
    }

    /// `[N,3,H,W]` image batch to `[N,1,H,W]` mask probabilities.
    pub fn forward<'t, T: Real>(&self, p: &BoundParams<'t, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        check_rgb_batch(&image.shape(), 3)?;
        check_divisible(&image.shape(), 1 << DETECTION_LEVELS)?;
        let layers = self.layers();
        let mut it = layers.iter();
        let mut step = |x: Var<'t, T>| -> Result<Var<'t, T>> { Ok(it.next().expect("layer list").apply(p, x)?.relu()) };
        let mut skips = vec![image];
        let mut x = image;
        for _ in 0..DETECTION_LEVELS {
            x = step(x)?;
            x = step(x)?;
            x = step(x)?;
            skips.push(x);
        }
        skips.pop();
        for _ in 0..DETECTION_LEVELS {
            x = step(x.upsample_nearest2x()?)?;
            let skip = skips.pop().expect("one skip per level");
            x = step(Var::concat_channels(&[x, skip])?)?;
            x = step(x)?;
        }
        drop(step);
        let head = layers.last().expect("head layer");
        Ok(head.apply(p, x)?.sigmoid())
    }
}
