//! Adam with bias correction, over named parameter sets.

use serde::{Deserialize, Serialize};
use tashr_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::nets::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first: ParamSet<T>,
    pub second: ParamSet<T>,
    pub steps: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    /// Applies one update. Every parameter must have a gradient.
    pub fn step(&mut self, config: &AdamConfig, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let b1 = config.beta1;
        let b2 = config.beta2;
        let lr_t = config.learning_rate * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (lr_t, eps) = (T::from_f64_lossy(lr_t), T::from_f64_lossy(config.eps));
        let one = T::one();
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("no gradient for {name}")))?;
            let m = self.first.get_mut(name).ok_or_else(|| missing(name))?;
            let v = self.second.get_mut(name).ok_or_else(|| missing(name))?;
            update(p, g, m, v, |p, g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p - lr_t * *m / (v.sqrt() + eps);
            });
        }
        Ok(())
    }
}

fn missing(name: &str) -> Error {
    Error::Checkpoint(format!("no optimizer moments for {name}"))
}

fn update<T: Real>(p: &mut Tensor<T>, g: &Tensor<T>, m: &mut Tensor<T>, v: &mut Tensor<T>, f: impl Fn(&mut T, T, &mut T, &mut T)) {
    let gd = g.data();
    for (((pi, &gi), mi), vi) in p
        .data_mut()
        .iter_mut()
        .zip(gd)
        .zip(m.data_mut().iter_mut())
        .zip(v.data_mut().iter_mut())
    {
        f(pi, gi, mi, vi);
    }
}
