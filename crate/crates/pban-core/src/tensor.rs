//! Dense row-major tensors over `f32` or `f64`.
//!
//! Storage is a shared `Arc<Vec<T>>` so cloning a tensor, capturing it in a
//! backward closure, or reshaping it never copies the buffer. A scalar is a
//! rank-0 tensor: empty shape, one element.

use std::fmt::{Debug, Display};
use std::sync::Arc;

use num_traits::Float;

use crate::error::{PbanError, Result};

/// Element type of every tensor in the crate. `f32` is the training and
/// checkpoint type, `f64` the finite-difference verification type.
pub trait Scalar:
    Float
    + Debug
    + Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Number of elements a shape addresses. Empty shape means one element.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Wraps a buffer; the buffer length must match the shape exactly.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(PbanError::Dimension {
                op: "tensor_new",
                msg: format!("shape {:?} addresses {} elements, buffer has {}", shape, numel(&shape), data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); numel(shape)]),
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel(shape)]),
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel(shape);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f(i));
        }
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent along axis `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the buffer, copying first if it is shared.
    pub fn make_mut(&mut self) -> &mut [T] {
        let v: &mut Vec<T> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(PbanError::Dimension {
                op: "item",
                msg: format!("expected one element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(PbanError::Dimension {
                op: "reshape",
                msg: format!("cannot view {:?} ({} elements) as {:?}", self.shape, self.data.len(), shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    /// Errors if any element is NaN or infinite; `op` names the producer.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        for (i, &x) in self.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(PbanError::NonFinite { op, index: i });
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect()),
        }
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(PbanError::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut worst = 0.0f64;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            worst = worst.max((a.to_f64() - b.to_f64()).abs());
        }
        Ok(worst)
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}
