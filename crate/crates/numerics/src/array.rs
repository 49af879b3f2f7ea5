//! Plain host-side dense arrays, used for parameter storage and scene data.
//!
//! `NdArray` carries no tape affiliation; it is the at-rest form of every
//! value. Feeding one into a computation goes through `Tape::leaf` /
//! `Tape::constant`.

use crate::error::{Result, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Dimension {
                op: "NdArray::new",
                detail: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Flat index of a multi-dimensional index (row-major).
    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (d, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        flat
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Boolean presence/validity mask with tensor shape semantics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolTensor {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BoolTensor {
    pub fn new(shape: Vec<usize>, data: Vec<bool>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Dimension {
                op: "BoolTensor::new",
                detail: format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: bool) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (d, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        flat
    }

    pub fn at(&self, index: &[usize]) -> bool {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: bool) {
        let i = self.flat_index(index);
        self.data[i] = value;
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Expands to `target` under right-aligned broadcasting rules.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<BoolTensor> {
        let bstrides = crate::kernels::broadcast_strides(&self.shape, target).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: "BoolTensor::broadcast_to",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            }
        })?;
        let numel: usize = target.iter().product();
        let mut out = vec![false; numel];
        let mut coords = vec![0usize; target.len()];
        for (flat, slot) in out.iter_mut().enumerate() {
            crate::kernels::unravel(flat, target, &mut coords);
            let mut src = 0;
            for (d, &c) in coords.iter().enumerate() {
                src += c * bstrides[d];
            }
            *slot = self.data[src];
        }
        BoolTensor::new(target.to_vec(), out)
    }
}
