//! Minimal dense tensor: a shape plus a contiguous row-major `Vec<f64>`.
//!
//! Every numerical kernel in this crate (convolutions, scans, reductions)
//! works directly on these flat buffers; the struct deliberately has no
//! view/stride machinery. A scalar is represented by an empty shape.

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        NdArray { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    /// Constant-filled tensor of the given shape.
    pub fn full(shape: &[usize], value: f64) -> Self {
        NdArray { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        NdArray { shape: vec![], data: vec![value] }
    }

    /// Build from an existing buffer; the element count must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer of {} elements does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(NdArray { shape: shape.to_vec(), data })
    }

    /// Tensor shape (empty slice for scalars).
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements (some dimension is zero).
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat read-only view of the buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Flat mutable view of the buffer.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consume into the flat buffer.
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a rank-0/one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!("expected a scalar, found shape {:?}", self.shape)))
        }
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        NdArray::from_vec(shape, self.data.clone())
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        NdArray { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip(&self, other: &NdArray, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(NdArray { shape: self.shape.clone(), data })
    }

    /// Sum of all elements.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute element (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = NdArray::scalar(4.25);
        assert!(s.shape().is_empty());
        assert_eq!(s.len(), 1);
        assert_eq!(s.scalar_value().unwrap(), 4.25);
    }

    #[test]
    fn from_vec_rejects_mismatched_buffer() {
        assert!(NdArray::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(NdArray::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn zip_rejects_shape_mismatch() {
        let a = NdArray::zeros(&[2, 2]);
        let b = NdArray::zeros(&[4]);
        assert!(a.zip(&b, |x, y| x + y).is_err());
    }

    #[test]
    fn map_and_sum_are_elementwise() {
        let a = NdArray::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        let b = a.map(|v| v * v);
        assert_eq!(b.data(), &[1.0, 4.0, 9.0]);
        assert_eq!(b.sum(), 14.0);
        assert_eq!(a.max_abs(), 3.0);
    }

    #[test]
    fn reshape_preserves_data() {
        let a = NdArray::from_vec(&[2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let b = a.reshape(&[3, 2]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        assert_eq!(b.data(), a.data());
        assert!(a.reshape(&[4]).is_err());
    }
}
