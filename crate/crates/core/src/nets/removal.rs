use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tashr_tensor::{Real, Var};

use super::params::{init_layers, BoundParams, ConvSpec, ParamSet};
use super::{check_divisible, check_rgb_batch};
use crate::error::{Error, Result};

/// Encoder-decoder that maps `[image ‖ mask]` to a highlight-free image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalNetConfig {
    pub base_channels: usize,
}

impl Default for RemovalNetConfig {
    fn default() -> Self {
        Self { base_channels: 64 }
    }
}

pub const RESIDUAL_BLOCKS: usize = 4;

impl RemovalNetConfig {
    pub fn layers(&self) -> Vec<ConvSpec> {
        let b = self.base_channels;
        let mut layers = vec![
            ConvSpec::new("stem", 4, b, 7, 1, true),
            ConvSpec::new("down1", b, 2 * b, 3, 2, true),
            ConvSpec::new("down2", 2 * b, 4 * b, 3, 2, true),
        ];
        for i in 0..RESIDUAL_BLOCKS {
            layers.push(ConvSpec::new(format!("res{i}.conv1"), 4 * b, 4 * b, 3, 1, true));
            layers.push(ConvSpec::new(format!("res{i}.conv2"), 4 * b, 4 * b, 3, 1, true));
        }
        // up2 also sees the raw input: instance norm throws away absolute
        // color, which the output has to reproduce outside the highlight
        layers.push(ConvSpec::new("up1", 4 * b + 2 * b, 2 * b, 3, 1, true));
        layers.push(ConvSpec::new("up2", 2 * b + b + 4, b, 3, 1, true));
        layers.push(ConvSpec::new("head", b, 3, 3, 1, false));
        layers
    }

    pub fn init<T: Real>(&self, rng: &mut ChaCha8Rng) -> ParamSet<T> {
        init_layers(&self.layers(), rng)
    }

    /// `[N,3,H,W]` image and `[N,1,H,W]` mask to a `[N,3,H,W]` image in [0,1].
    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        image: Var<'t, T>,
        mask: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (is, ms) = (image.shape(), mask.shape());
        check_rgb_batch(&is, 3)?;
        check_rgb_batch(&ms, 1)?;
        if is[0] != ms[0] || is[2..] != ms[2..] {
            return Err(Error::DimensionMismatch {
                left_h: is[2],
                left_w: is[3],
                right_h: ms[2],
                right_w: ms[3],
            });
        }
        check_divisible(&is, 4)?;
        let layers = self.layers();
        let by_name = |name: &str| layers.iter().find(|l| l.name == name).expect("known layer");
        let block = |name: &str, x: Var<'t, T>| -> Result<Var<'t, T>> { Ok(by_name(name).apply(p, x)?.relu()) };

        let input = Var::concat_channels(&[image, mask])?;
        let s0 = block("stem", input)?;
        let s1 = block("down1", s0)?;
        let mut x = block("down2", s1)?;
        for i in 0..RESIDUAL_BLOCKS {
            let h = block(&format!("res{i}.conv1"), x)?;
            let h = by_name(&format!("res{i}.conv2")).apply(p, h)?;
            x = x.add(h)?;
        }
        let x = block("up1", Var::concat_channels(&[x.upsample_nearest2x()?, s1])?)?;
        let x = block("up2", Var::concat_channels(&[x.upsample_nearest2x()?, s0, input])?)?;
        Ok(by_name("head").apply(p, x)?.sigmoid())
    }
}
