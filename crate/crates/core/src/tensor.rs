//! Dense row-major tensors over `f32` or `f64`.
//!
//! Everything in the engine stores and trains in `f32`; gradient checking
//! converts whole networks to `f64` for headroom against finite-difference
//! truncation error. The `Scalar` trait is the switch between the two.

use crate::error::{Error, Result};

/// Float type usable for network parameters and activations.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Row-major tensor; `data.len()` always equals the product of `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!(
                    "shape {:?} implies {} elements but {} were provided",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Fills a fresh tensor from a generator, in row-major order.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut() -> F) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| f()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshaped",
                format!(
                    "cannot view {} elements as shape {:?}",
                    self.data.len(),
                    shape
                ),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Leading dimension, i.e. the batch size for activation tensors.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per leading-dimension slice.
    pub fn row_len(&self) -> usize {
        if self.rows() == 0 {
            0
        } else {
            self.data.len() / self.rows()
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Errors if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Converts element type, e.g. an `f32` batch to `f64` for grad checks.
    pub fn convert<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    /// Stacks per-example tensors of identical shape into one batch tensor.
    pub fn stack_rows(rows: &[&Tensor<F>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::EmptyDataset {
            context: "Tensor::stack_rows".to_string(),
        })?;
        let mut data = Vec::with_capacity(rows.len() * first.len());
        for (i, r) in rows.iter().enumerate() {
            if r.shape != first.shape {
                return Err(Error::shape(
                    "Tensor::stack_rows",
                    format!(
                        "row {} has shape {:?}, expected {:?}",
                        i, r.shape, first.shape
                    ),
                ));
            }
            data.extend_from_slice(&r.data);
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(rows.len());
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}
