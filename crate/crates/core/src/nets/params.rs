use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tashr_tensor::{Gradients, Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Named parameter tensors of one network, in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Fails unless `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &Self, what: &str) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("{what}: missing tensor {name}"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "{what}: tensor {name} has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|n| !self.tensors.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("{what}: unexpected tensor {extra}")));
        }
        Ok(())
    }

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundParams<'t, T> {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
                .collect(),
        }
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct BoundParams<'t, T> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> BoundParams<'t, T> {
    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name} is not bound")))
    }

    /// Gradient for every bound tensor; zeros where nothing flowed.
    pub fn gradients(&self, grads: &Gradients<T>) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, var) in &self.vars {
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&var.shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// One convolution, optionally followed by instance normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub norm: bool,
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize, stride: usize, norm: bool) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride,
            norm,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.norm.gamma", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.norm.beta", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// Fan-in scaled uniform weights, zero bias, unit-gain norm.
    pub fn init<T: Real>(&self, rng: &mut ChaCha8Rng, params: &mut ParamSet<T>) {
        let fan_in = self.in_channels * self.kernel * self.kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn(&self.weight_shape(), |_| T::from_f64_lossy(rng.gen_range(-bound..bound)));
        params.insert(self.weight_name(), w);
        if self.norm {
            params.insert(self.gamma_name(), Tensor::ones(&[self.out_channels]));
            params.insert(self.beta_name(), Tensor::zeros(&[self.out_channels]));
        } else {
            params.insert(self.bias_name(), Tensor::zeros(&[self.out_channels]));
        }
    }

    /// Convolution, then instance norm when configured. No activation.
    pub fn apply<'t, T: Real>(&self, p: &BoundParams<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = p.var(&self.weight_name())?;
        if self.norm {
            let y = x.conv2d(w, None, self.stride, self.padding())?;
            Ok(y.instance_norm(
                p.var(&self.gamma_name())?,
                p.var(&self.beta_name())?,
                T::from_f64_lossy(INSTANCE_NORM_EPS),
            )?)
        } else {
            Ok(x.conv2d(w, Some(p.var(&self.bias_name())?), self.stride, self.padding())?)
        }
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

pub fn init_layers<T: Real>(layers: &[ConvSpec], rng: &mut ChaCha8Rng) -> ParamSet<T> {
    let mut params = ParamSet::new();
    for layer in layers {
        layer.init(rng, &mut params);
    }
    params
}
