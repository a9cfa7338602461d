//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The element type is generic: `f32` is the working precision,
//! `f64` exists for verification (finite-difference tolerances are
//! unreachable in `f32` for deep graphs). Storage is row-major and
//! contiguous; there is no broadcasting beyond scalar multiply and the
//! dedicated per-channel [`PrimOp::ScaleShift`] operation, so shape
//! errors surface at the op that caused them.
//!
//! [`Graph`] records executed primitives when any input requires
//! gradients; [`Graph::backward`] replays the tape in reverse with a
//! fixed accumulation order, so gradients are bit-reproducible.

mod graph;
mod kernels;
mod optim;
mod params;
mod scalar;

pub use graph::{Gradients, Graph, PrimOp, Value};
pub use optim::{ema_update, Adam, AdamConfig};
pub use params::ParamSet;
pub use scalar::{Dtype, Scalar};

use std::sync::Arc;

use crate::{Error, Result};

/// A dense n-dimensional array with row-major contiguous storage.
///
/// Cloning is cheap: the buffer is shared until someone mutates it.
#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from a shape and a row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::new(data), requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![S::zero(); numel]), requires_grad: false }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: Arc::new(vec![value; numel]), requires_grad: false }
    }

    /// A single-element tensor of shape `[1]`.
    pub fn scalar(value: S) -> Self {
        Self::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        S::DTYPE
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access to the buffer; copies if the buffer is shared.
    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    /// The sole element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::NotScalar { numel: self.numel() });
        }
        Ok(self.data[0])
    }

    /// Interprets the shape as `(n, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::ShapeMismatch {
                op: "dims4",
                detail: format!("expected 4 dims, got {:?}", self.shape),
            }),
        }
    }

    /// Interprets the shape as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op: "dims2",
                detail: format!("expected 2 dims, got {:?}", self.shape),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        let data: Vec<S> = self.data.iter().map(|&v| f(v)).collect();
        Self { shape: self.shape.clone(), data: Arc::new(data), requires_grad: false }
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// True when shapes match and every element is bit-identical.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Largest relative elementwise difference, with an absolute floor.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_rel_diff: shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| {
                let (a, b) = (a.as_f64(), b.as_f64());
                (a - b).abs() / a.abs().max(b.abs()).max(1.0)
            })
            .fold(0.0, f64::max)
    }
}

pub(crate) fn same_shape<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}
