use crate::error::{FedMapError, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor of weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> WeightTensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(FedMapError::structural(format!(
                "tensor shape {shape:?} must have positive dimensions"
            )));
        }
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(FedMapError::structural(format!(
                "tensor shape {shape:?} needs {len} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FedMapError::Numeric {
                layer: 0,
                msg: format!("non-finite tensor value at index {pos}"),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            values: vec![T::zero(); len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
