//! Dense row-major N-d tensor with an optional gradient accumulator.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense numeric array. `data` is row-major; `grad`, when present, always has
/// the same length as `data` and accumulates additively across backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::config(format!(
                "shape {:?} implies {} elements but buffer holds {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Scalar (rank-0) tensor.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Marks the tensor trainable and allocates its gradient accumulator.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::ZERO; self.data.len()]);
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::ZERO; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    /// Resets the gradient accumulator to zero (keeps the allocation).
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    /// Returns a copy with a new shape covering the same number of elements.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::config(format!(
                "cannot reshape {:?} ({} elems) into {:?} ({} elems)",
                self.shape,
                self.data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    /// Converts elementwise into another scalar type via f64.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Largest absolute elementwise difference against another tensor.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major flat offset of index `[i, j]` in a `[d0, d1]` tensor.
#[inline]
pub fn idx2(d1: usize, i: usize, j: usize) -> usize {
    i * d1 + j
}

/// Row-major flat offset of index `[i, j, k]` in a `[d0, d1, d2]` tensor.
#[inline]
pub fn idx3(d1: usize, d2: usize, i: usize, j: usize, k: usize) -> usize {
    (i * d1 + j) * d2 + k
}

/// Row-major flat offset of index `[i, j, k, l]` in a `[d0, d1, d2, d3]` tensor.
#[inline]
pub fn idx4(d1: usize, d2: usize, d3: usize, i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * d1 + j) * d2 + k) * d3 + l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut t = Tensor::<f64>::zeros(&[3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn reshape_preserves_numel() {
        let t = Tensor::<f32>::from_vec(&[2, 6], (0..12).map(|v| v as f32).collect()).unwrap();
        let r = t.reshaped(&[3, 4]).unwrap();
        assert_eq!(r.shape(), &[3, 4]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[5, 5]).is_err());
    }

    #[test]
    fn flat_index_helpers() {
        assert_eq!(idx2(4, 1, 2), 6);
        assert_eq!(idx3(3, 4, 1, 2, 3), 23);
        assert_eq!(idx4(2, 3, 4, 1, 1, 2, 3), 47);
    }
}
