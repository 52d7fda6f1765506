//! Dense tensors and tape-based reverse-mode autodiff.
//!
//! Just enough machinery for convolutional image-to-image networks: strided
//! convolutions, instance normalization, nearest-neighbour upsampling,
//! pooling, Gram matrices and L1-style reductions, in `f32` or `f64`.

pub mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use scalar::Real;
pub use tape::{bilinear, BackwardArgs, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    Shape { left: Vec<usize>, right: Vec<usize> },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("range {start}..{start}+{len} exceeds axis of size {size}")]
    OutOfRange { start: usize, len: usize, size: usize },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("empty operand list")]
    Empty,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
