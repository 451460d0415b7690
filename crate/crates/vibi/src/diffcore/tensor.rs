//! Dense row-major tensors, generic over the element precision.
//!
//! Training runs in 32-bit floats; the 64-bit instantiation exists for the
//! gradient-check shadow evaluation only.

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training, `f64` for the shadow mode.
pub trait Elem:
    Copy
    + Clone
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Largest argument to `exp` that does not overflow this precision.
    const EXP_SATURATION: Self;
    /// Floor applied to `ln` inputs.
    const LN_FLOOR: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const EXP_SATURATION: Self = 88.0;
    const LN_FLOOR: Self = 1e-12;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const EXP_SATURATION: Self = 709.0;
    const LN_FLOOR: Self = 1e-12;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Dense n-dimensional array in row-major order.
///
/// Invariant: `shape.iter().product() == data.len()`. A rank-0 tensor is a
/// scalar holding exactly one element.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorOf<E: Elem> {
    shape: Vec<usize>,
    data: Vec<E>,
}

/// The training-precision tensor.
pub type Tensor = TensorOf<f32>;

impl<E: Elem> TensorOf<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "zero-sized dimension in shape {:?}",
                shape
            )));
        }
        Ok(TensorOf { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        TensorOf {
            shape,
            data: vec![E::ZERO; numel],
        }
    }

    pub fn scalar(v: E) -> Self {
        TensorOf {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<E>) -> Self {
        TensorOf {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Sole element of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if !self.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy precision cast (used at the f32/f64 boundary of grad_check).
    pub fn cast<F: Elem>(&self) -> TensorOf<F> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }
}
