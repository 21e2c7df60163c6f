//! The `[N, C, H, W]` image/latent tensor used across the crate.

use ndarray::Array4;

use crate::error::{Error, Result};

/// A batch of images or diffusion latents, indexed `[sample, channel, y, x]`.
///
/// Construction validates that every entry is finite; the payload is
/// immutable afterwards, so downstream code can rely on finiteness.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array4<f64>,
}

impl ImageTensor {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (n, c, h, w) = data.dim();
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidDimension(format!(
                "all dims must be positive, got {:?}",
                (n, c, h, w)
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteInput(
                "tensor contains NaN or infinite entries".into(),
            ));
        }
        Ok(Self { data })
    }

    /// Tensor filled with a constant.
    pub fn full(dims: (usize, usize, usize, usize), value: f64) -> Result<Self> {
        Self::new(Array4::from_elem(dims, value))
    }

    pub fn zeros(dims: (usize, usize, usize, usize)) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    /// `(N, C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn same_dims(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    /// Elementwise `a*self + b*other`.
    pub fn affine_combine(&self, a: f64, other: &ImageTensor, b: f64) -> Result<ImageTensor> {
        if !self.same_dims(other) {
            return Err(Error::ShapeMismatch(format!(
                "cannot combine {:?} with {:?}",
                self.dims(),
                other.dims()
            )));
        }
        ImageTensor::new(a * &self.data + b * &other.data)
    }

    /// Mean of squared entrywise differences.
    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        if !self.same_dims(other) {
            return Err(Error::ShapeMismatch(format!(
                "mse over {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / n)
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_non_finite() {
        let bad = Array4::from_elem((1, 1, 2, 2), f64::NAN);
        assert!(matches!(
            ImageTensor::new(bad),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn rejects_empty_dims() {
        let bad = Array4::<f64>::zeros((1, 0, 2, 2));
        assert!(matches!(
            ImageTensor::new(bad),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn affine_combine_and_mse() {
        let a = ImageTensor::new(array![[[[1.0, 2.0], [3.0, 4.0]]]]).unwrap();
        let b = ImageTensor::new(array![[[[5.0, 6.0], [7.0, 8.0]]]]).unwrap();
        let c = a.affine_combine(1.0, &b, 1.0).unwrap();
        assert_eq!(c.data()[[0, 0, 0, 0]], 6.0);
        assert_eq!(a.mse(&b).unwrap(), 16.0);
    }
}
