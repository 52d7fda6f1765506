use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tashr_tensor::{Real, Tensor, Var};

use super::params::{init_layers, BoundParams, ConvSpec, ParamSet};
use super::{check_divisible, check_rgb_batch};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DISCRIMINATOR_KERNEL: usize = 5;
/// Total spatial reduction from image to score map.
pub const SCORE_STRIDE: usize = 32;

/// Patch discriminator: one stride-1 conv, then five stride-2 convs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64 }
    }
}

impl DiscriminatorConfig {
    pub fn layers(&self) -> Vec<ConvSpec> {
        let b = self.base_channels;
        let widths = [b, 2 * b, 4 * b, 8 * b, 8 * b, 8 * b];
        let mut cin = 3;
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = if i == 0 { 1 } else { 2 };
                let l = ConvSpec::new(format!("conv{i}"), cin, w, DISCRIMINATOR_KERNEL, stride, false);
                cin = w;
                l
            })
            .collect()
    }

    pub fn init<T: Real>(&self, rng: &mut ChaCha8Rng) -> ParamSet<T> {
        init_layers(&self.layers(), rng)
    }

    /// `[N,3,H,W]` images to `[N,8b,H/32,W/32]` unbounded patch scores.
    ///
    /// Every weight is divided by its spectral norm estimate from `spectral`;
    /// the division is part of the graph.
    pub fn forward<'t, T: Real>(
        &self,
        p: &BoundParams<'t, T>,
        spectral: &SpectralState<T>,
        image: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        check_rgb_batch(&image.shape(), 3)?;
        check_divisible(&image.shape(), SCORE_STRIDE)?;
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut x = image;
        for (i, l) in layers.iter().enumerate() {
            let name = l.weight_name();
            let (u, v) = spectral.vectors(&name)?;
            let w = p.var(&name)?.spectral_scale(u, v)?;
            x = x.conv2d(w, Some(p.var(&l.bias_name())?), l.stride, l.padding())?;
            if i < last {
                x = x.leaky_relu(T::from_f64_lossy(LEAKY_SLOPE));
            }
        }
        Ok(x)
    }
}

/// Persistent left/right singular vector estimates, one pair per weight.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SpectralState<T> {
    vectors: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> SpectralState<T> {
    /// Random unit vectors sized for every 4-d weight in `params`.
    pub fn init(params: &ParamSet<T>, rng: &mut ChaCha8Rng) -> Self {
        let mut vectors = BTreeMap::new();
        for (name, w) in params.iter().filter(|(_, w)| w.shape().len() == 4) {
            let rows = w.shape()[0];
            let cols = w.len() / rows;
            let mut draw = |n: usize| {
                let mut x: Vec<T> = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))).collect();
                normalize(&mut x);
                x
            };
            let u = draw(rows);
            let v = draw(cols);
            vectors.insert(name.clone(), (u, v));
        }
        Self { vectors }
    }

    pub fn from_map(vectors: BTreeMap<String, (Vec<T>, Vec<T>)>) -> Self {
        Self { vectors }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &(Vec<T>, Vec<T>))> {
        self.vectors.iter()
    }

    pub fn vectors(&self, name: &str) -> Result<(&[T], &[T])> {
        self.vectors
            .get(name)
            .map(|(u, v)| (u.as_slice(), v.as_slice()))
            .ok_or_else(|| Error::Checkpoint(format!("no spectral vectors for {name}")))
    }

    /// One power-iteration step per weight.
    pub fn update(&mut self, params: &ParamSet<T>) -> Result<()> {
        for (name, (u, v)) in &mut self.vectors {
            let w = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("no weight {name} for spectral vectors")))?;
            power_iteration(w.data(), u, v);
        }
        Ok(())
    }

    /// Checks the vector lengths against the weights they belong to.
    pub fn check_layout(&self, params: &ParamSet<T>) -> Result<()> {
        for (name, w) in params.iter().filter(|(_, w)| w.shape().len() == 4) {
            let rows = w.shape()[0];
            let (u, v) = self.vectors(name)?;
            if u.len() != rows || v.len() != w.len() / rows {
                return Err(Error::Checkpoint(format!(
                    "spectral vectors for {name} have lengths {}/{}, expected {rows}/{}",
                    u.len(),
                    v.len(),
                    w.len() / rows
                )));
            }
        }
        if self.vectors.len() != params.iter().filter(|(_, w)| w.shape().len() == 4).count() {
            return Err(Error::Checkpoint("spectral vector set does not match the weights".into()));
        }
        Ok(())
    }
}

fn normalize<T: Real>(x: &mut [T]) -> T {
    let n = x.iter().map(|&a| a * a).sum::<T>().sqrt();
    if n > T::zero() && n.is_finite() {
        for a in x.iter_mut() {
            *a = *a / n;
        }
    }
    n
}

/// `v ← Wᵀu/‖Wᵀu‖`, `u ← Wv/‖Wv‖` for a row-major `u.len() × v.len()` matrix.
/// Vectors are left as they are when a product vanishes.
pub fn power_iteration<T: Real>(w: &[T], u: &mut [T], v: &mut [T]) {
    let (rows, cols) = (u.len(), v.len());
    debug_assert_eq!(w.len(), rows * cols);
    let mut nv = vec![T::zero(); cols];
    for (r, &ur) in u.iter().enumerate() {
        for (acc, &wv) in nv.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *acc = *acc + ur * wv;
        }
    }
    if normalize(&mut nv) > T::zero() {
        v.copy_from_slice(&nv);
    }
    let mut nu: Vec<T> = (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v.iter()).map(|(&a, &b)| a * b).sum())
        .collect();
    if normalize(&mut nu) > T::zero() {
        u.copy_from_slice(&nu);
    }
}

/// Largest-singular-value estimate `uᵀWv`.
pub fn sigma_estimate<T: Real>(w: &[T], u: &[T], v: &[T]) -> T {
    tashr_tensor::bilinear(w, u, v)
}

/// Divides `weight` (viewed as `shape[0] × rest`) by its spectral norm
/// estimate after `iterations` power steps on the persistent `u`, `v`.
/// A zero or non-finite estimate returns the weight unchanged.
pub fn spectral_normalize<T: Real>(weight: &Tensor<T>, u: &mut [T], v: &mut [T], iterations: usize) -> Result<Tensor<T>> {
    let rows = weight.shape().first().copied().unwrap_or(0);
    if rows == 0 || u.len() != rows || v.len() * rows != weight.len() {
        return Err(Error::Tensor(tashr_tensor::TensorError::Shape {
            left: weight.shape().to_vec(),
            right: vec![u.len(), v.len()],
        }));
    }
    for _ in 0..iterations {
        power_iteration(weight.data(), u, v);
    }
    let sigma = sigma_estimate(weight.data(), u, v);
    if sigma == T::zero() || !sigma.is_finite() {
        return Ok(weight.clone());
    }
    Ok(weight.map(|a| a / sigma))
}
