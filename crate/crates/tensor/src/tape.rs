//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. A [`Var`] is a cheap copyable handle into the tape.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, ConvGeometry};
use crate::{Real, Result, Tensor, TensorError};

type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

/// What a backward closure sees: upstream gradient, input values, own output,
/// and which inputs actually need a gradient.
pub struct BackwardArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
    pub needs: &'a [bool],
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by [`Var::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), None, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), None, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), None, requires_grad)
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        inputs: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Appends an operation node. `backward` is dropped when no input needs a
    /// gradient, which keeps frozen sub-graphs free of closures.
    pub fn record(
        &self,
        inputs: &[Var<'_, T>],
        value: Tensor<T>,
        backward: impl Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = ids.iter().any(|&i| self.requires_grad(i));
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(Rc::new(value), ids, backward, requires_grad)
    }

    fn backward_from(&self, root: usize) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root];
        if root_node.value.len() != 1 {
            return Err(TensorError::NotScalar(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(root_node.value.shape(), T::one()));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor<T>>> =
                node.inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = backward(&BackwardArgs {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            })?;
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                match grads[input].as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => grads[input] = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Gradients of this scalar with respect to every upstream variable.
    pub fn backward(&self) -> Result<Gradients<T>> {
        self.tape.backward_from(self.id)
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.push(self.value(), Vec::new(), None, false)
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.tape.record(&[*self, other], v, |a| {
            Ok(vec![Some(a.grad.clone()), Some(a.grad.clone())])
        }))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.tape.record(&[*self, other], v, |a| {
            Ok(vec![Some(a.grad.clone()), Some(a.grad.map(|g| -g))])
        }))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.tape.record(&[*self, other], v, |a| {
            let ga = a.needs[0].then(|| a.grad.zip_map(&a.inputs[1], |g, y| g * y)).transpose()?;
            let gb = a.needs[1].then(|| a.grad.zip_map(&a.inputs[0], |g, x| g * x)).transpose()?;
            Ok(vec![ga, gb])
        }))
    }

    /// `factor * self + offset`, elementwise.
    pub fn affine(&self, factor: T, offset: T) -> Var<'t, T> {
        let v = self.value().map(|x| factor * x + offset);
        self.tape
            .record(&[*self], v, move |a| Ok(vec![Some(a.grad.map(|g| g * factor))]))
    }

    pub fn scale(&self, factor: T) -> Var<'t, T> {
        self.affine(factor, T::zero())
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        let v = self
            .value()
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.tape.record(&[*self], v, move |a| {
            Ok(vec![Some(a.grad.zip_map(&a.inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else {
                    g * slope
                }
            })?)])
        })
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let v = self.value().map(|x| T::one() / (T::one() + (-x).exp()));
        self.tape.record(&[*self], v, |a| {
            Ok(vec![Some(
                a.grad.zip_map(a.output, |g, y| g * y * (T::one() - y))?,
            )])
        })
    }

    pub fn sum_all(&self) -> Var<'t, T> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.record(&[*self], v, |a| {
            Ok(vec![Some(Tensor::full(a.inputs[0].shape(), a.grad.item()))])
        })
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        let inv = T::one() / T::from_usize(n).unwrap();
        self.sum_all().scale(inv)
    }

    /// Mean of `|self - other|` over every element.
    pub fn mean_abs_diff(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.mean_abs_diff_shifted(other, 0, 0)
    }

    /// Mean of `|self[.., i, j] - other[.., i - dy, j - dx]|` over the rows
    /// `i >= dy` and columns `j >= dx` where both sides exist.
    pub fn mean_abs_diff_shifted(&self, other: Var<'t, T>, dy: usize, dx: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        a.expect_same_shape(&b)?;
        let (lead, h, w) = spatial_split(a.shape());
        if dy >= h || dx >= w {
            return Err(TensorError::OutOfRange {
                start: dy.max(dx),
                len: 1,
                size: h.min(w),
            });
        }
        let count = lead * (h - dy) * (w - dx);
        let inv = T::one() / T::from_usize(count.max(1)).unwrap();
        let mut total = T::zero();
        for_each_shifted(lead, h, w, dy, dx, |ia, ib| {
            total = total + (a.data()[ia] - b.data()[ib]).abs();
        });
        let v = Tensor::scalar(total * inv);
        Ok(self.tape.record(&[*self, other], v, move |args| {
            let (a, b) = (&args.inputs[0], &args.inputs[1]);
            let g = args.grad.item() * inv;
            let mut ga = Tensor::zeros(a.shape());
            let mut gb = Tensor::zeros(b.shape());
            for_each_shifted(lead, h, w, dy, dx, |ia, ib| {
                let s = sign(a.data()[ia] - b.data()[ib]) * g;
                ga.data_mut()[ia] = ga.data()[ia] + s;
                gb.data_mut()[ib] = gb.data()[ib] - s;
            });
            Ok(vec![Some(ga), Some(gb)])
        }))
    }

    pub fn conv2d(
        &self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let geom = ConvGeometry { stride, padding };
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let y = kernels::conv2d_forward(&x, &w, b.as_deref(), geom)?;
        let mut inputs = vec![*self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.record(&inputs, y, move |a| {
            let need_b = has_bias && a.needs[2];
            let g = kernels::conv2d_backward(
                &a.inputs[0],
                &a.inputs[1],
                a.grad,
                geom,
                [a.needs[0], a.needs[1], need_b],
            )?;
            let mut out = vec![g.input, g.weight];
            if has_bias {
                out.push(g.bias);
            }
            Ok(out)
        }))
    }

    pub fn instance_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let y = kernels::instance_norm_forward(&self.value(), &gamma.value(), &beta.value(), eps)?;
        Ok(self.tape.record(&[*self, gamma, beta], y, move |a| {
            let (dx, dg, db) = kernels::instance_norm_backward(&a.inputs[0], &a.inputs[1], a.grad, eps)?;
            Ok(vec![Some(dx), Some(dg), Some(db)])
        }))
    }

    pub fn upsample_nearest2x(&self) -> Result<Var<'t, T>> {
        let y = kernels::upsample_nearest2x_forward(&self.value())?;
        Ok(self.tape.record(&[*self], y, |a| {
            Ok(vec![Some(kernels::upsample_nearest2x_backward(a.grad)?)])
        }))
    }

    pub fn max_pool2x2(&self) -> Result<Var<'t, T>> {
        let (y, arg) = kernels::max_pool2x2_forward(&self.value())?;
        Ok(self.tape.record(&[*self], y, move |a| {
            let mut dx = Tensor::zeros(a.inputs[0].shape());
            for (&src, &g) in arg.iter().zip(a.grad.data()) {
                dx.data_mut()[src] = dx.data()[src] + g;
            }
            Ok(vec![Some(dx)])
        }))
    }

    /// Per-sample normalized Gram matrix, `[N, C, H, W] -> [N, C, C]`.
    pub fn gram(&self) -> Result<Var<'t, T>> {
        let y = kernels::gram_forward(&self.value())?;
        Ok(self.tape.record(&[*self], y, |a| {
            Ok(vec![Some(kernels::gram_backward(&a.inputs[0], a.grad)?)])
        }))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::Empty)?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let y = kernels::concat_channels(&refs)?;
        let channels: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        Ok(first.tape.record(parts, y, move |a| {
            Ok(kernels::split_channels(a.grad, &channels)?
                .into_iter()
                .map(Some)
                .collect())
        }))
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::Empty)?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let y = Tensor::cat0(&refs)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        Ok(first.tape.record(parts, y, move |a| {
            let mut start = 0;
            let mut out = Vec::with_capacity(sizes.len());
            for &n in &sizes {
                out.push(Some(a.grad.narrow0(start, n)?));
                start += n;
            }
            Ok(out)
        }))
    }

    /// Rows `start..start + len` of the batch axis.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let y = self.value().narrow0(start, len)?;
        Ok(self.tape.record(&[*self], y, move |a| {
            let full = a.inputs[0].shape();
            let stride: usize = full[1..].iter().product();
            let mut dx = Tensor::zeros(full);
            dx.data_mut()[start * stride..(start + len) * stride].copy_from_slice(a.grad.data());
            Ok(vec![Some(dx)])
        }))
    }

    /// `W / σ` with `σ = uᵀ W v` for a weight viewed as `[out, rest]`.
    ///
    /// `u` and `v` are held constant. A zero σ leaves the weight unchanged.
    pub fn spectral_scale(&self, u: &[T], v: &[T]) -> Result<Var<'t, T>> {
        let w = self.value();
        let rows = w.shape()[0];
        let cols = w.len() / rows.max(1);
        if u.len() != rows || v.len() != cols {
            return Err(TensorError::Shape {
                left: w.shape().to_vec(),
                right: vec![u.len(), v.len()],
            });
        }
        let sigma = bilinear(w.data(), u, v);
        if sigma == T::zero() || !sigma.is_finite() {
            let y = (*w).clone();
            return Ok(self.tape.record(&[*self], y, |a| Ok(vec![Some(a.grad.clone())])));
        }
        let inv = T::one() / sigma;
        let y = w.map(|x| x * inv);
        let (u, v) = (u.to_vec(), v.to_vec());
        Ok(self.tape.record(&[*self], y, move |a| {
            let w = &a.inputs[0];
            let inner: T = a.grad.data().iter().zip(w.data()).map(|(&g, &x)| g * x).sum();
            let coeff = inner * inv * inv;
            let mut dw = a.grad.map(|g| g * inv);
            for (r, &ur) in u.iter().enumerate() {
                for (c, &vc) in v.iter().enumerate() {
                    let i = r * cols + c;
                    dw.data_mut()[i] = dw.data()[i] - coeff * ur * vc;
                }
            }
            Ok(vec![Some(dw)])
        }))
    }
}

/// `uᵀ W v` for a row-major `W`.
pub fn bilinear<T: Real>(w: &[T], u: &[T], v: &[T]) -> T {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| {
            let row = &w[r * cols..(r + 1) * cols];
            ur * row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>()
        })
        .sum()
}

fn spatial_split(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, 1, shape[0]),
        n => (
            shape[..n - 2].iter().product(),
            shape[n - 2],
            shape[n - 1],
        ),
    }
}

fn for_each_shifted(
    lead: usize,
    h: usize,
    w: usize,
    dy: usize,
    dx: usize,
    mut f: impl FnMut(usize, usize),
) {
    for p in 0..lead {
        for i in dy..h {
            for j in dx..w {
                f((p * h + i) * w + j, (p * h + i - dy) * w + j - dx);
            }
        }
    }
}
