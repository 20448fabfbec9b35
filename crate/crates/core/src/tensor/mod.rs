//! Minimal dense `f32` tensors with reverse-mode differentiation.
//!
//! Volumes are laid out as `(N, C, X, Y, Z)` in row-major order (Z fastest).
//! Only the operations the segmentation networks need are provided; the
//! convolution kernels lower to `sgemm` through an im2col buffer that is
//! processed in bounded chunks so full-scale volumes fit in memory.

mod conv;
mod graph;

pub use conv::{ConvGeometry, ConvKind};
pub use graph::{Graph, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(N, C, [X, Y, Z])` of a rank-5 tensor.
    pub fn dims5(&self) -> Result<(usize, usize, [usize; 3])> {
        match self.shape[..] {
            [n, c, x, y, z] => Ok((n, c, [x, y, z])),
            _ => Err(Error::shape(format!(
                "expected a rank-5 (N, C, X, Y, Z) tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Stacks rank-4 `(C, X, Y, Z)` samples into a rank-5 batch.
    pub fn stack(samples: &[&Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty batch"))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * samples.len());
        for s in samples {
            if s.shape() != first.shape() {
                return Err(Error::shape(format!(
                    "batch members differ: {:?} vs {:?}",
                    first.shape(),
                    s.shape()
                )));
            }
            data.extend_from_slice(s.data());
        }
        Tensor::from_vec(&shape, data)
    }

    /// The `index`-th sample of a batch, dropping the leading axis.
    pub fn sample(&self, index: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * per..(index + 1) * per].to_vec(),
        }
    }
}
