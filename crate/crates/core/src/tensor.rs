//! Dense row-major `f32` arrays and their masked counterpart.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return invalid(format!("tensor dims must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                context: "tensor construction".into(),
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
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

    /// Leading dimension (batch size for activations).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all but the leading dimension.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                context: "reshape".into(),
                expected: shape,
                got: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gather the given rows into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A weight array paired with a binary mask of the same shape.
///
/// Wherever the mask is off the value is exactly `0.0`; every mutating
/// method re-establishes this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedTensor {
    values: Tensor,
    mask: Vec<bool>,
}

impl MaskedTensor {
    pub fn dense(values: Tensor) -> Self {
        let mask = vec![true; values.len()];
        Self { values, mask }
    }

    pub fn new(mut values: Tensor, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != values.len() {
            return Err(Error::Shape {
                context: "mask".into(),
                expected: values.shape().to_vec(),
                got: vec![mask.len()],
            });
        }
        for (v, &m) in values.data_mut().iter_mut().zip(&mask) {
            if !m {
                *v = 0.0;
            }
        }
        Ok(Self { values, mask })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn data(&self) -> &[f32] {
        self.values.data()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn density(&self) -> f64 {
        self.active_count() as f64 / self.len() as f64
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        *self = MaskedTensor::new(self.values.clone(), mask)?;
        Ok(())
    }

    /// Mutate values through a closure, then re-apply the mask.
    pub fn update_values(&mut self, f: impl FnOnce(&mut [f32])) {
        f(self.values.data_mut());
        self.reapply();
    }

    pub(crate) fn set_active(&mut self, idx: usize, active: bool, value: f32) {
        self.mask[idx] = active;
        self.values.data_mut()[idx] = if active { value } else { 0.0 };
    }

    /// Raw access that skips the mask; callers restore the invariant.
    pub(crate) fn values_mut_raw(&mut self) -> &mut [f32] {
        self.values.data_mut()
    }

    fn reapply(&mut self) {
        for (v, &m) in self.values.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
    }

    /// True when every masked-out value is exactly zero.
    pub fn invariant_holds(&self) -> bool {
        self.values
            .data()
            .iter()
            .zip(&self.mask)
            .all(|(&v, &m)| m || v.to_bits() == 0)
    }
}
