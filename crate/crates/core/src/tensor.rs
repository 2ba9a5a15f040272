//! Dense tensors: layer weights and batched activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weights of one conv (`[filters, channels, kh, kw]`) or fully-connected
/// (`[out, in]`) layer, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub layer_id: usize,
}

impl<T: Scalar> WeightTensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>, layer_id: usize) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                layer: layer_id,
                detail: format!("every dimension must be >= 1, got {shape:?}"),
            });
        }
        let want: usize = shape.iter().product();
        if values.len() != want {
            return Err(Error::Shape {
                layer: layer_id,
                detail: format!("buffer holds {} values, shape {shape:?} needs {want}", values.len()),
            });
        }
        Ok(Self { shape, values, layer_id })
    }

    pub fn zeros(shape: Vec<usize>, layer_id: usize) -> Self {
        let len = shape.iter().product();
        Self { shape, values: vec![T::zero(); len], layer_id }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows of the GEMM view (filters / output neurons).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of the GEMM view (`channels * kh * kw` or `in`).
    pub fn cols(&self) -> usize {
        self.values.len() / self.shape[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> WeightTensor<U> {
        WeightTensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            layer_id: self.layer_id,
        }
    }
}

/// A batch of feature maps stored channel-major: `[channels, batch, height, width]`.
///
/// Flat (fully-connected) activations use `height = width = 1`, which makes
/// the buffer a `features x batch` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Activation<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    /// Builds a channel-major batch from sample-major `[batch, channels, h, w]` data.
    pub fn from_nchw(batch: usize, channels: usize, height: usize, width: usize, nchw: &[T]) -> Self {
        assert_eq!(nchw.len(), batch * channels * height * width);
        let plane = height * width;
        let mut data = vec![T::zero(); nchw.len()];
        for b in 0..batch {
            for c in 0..channels {
                let src = (b * channels + c) * plane;
                let dst = (c * batch + b) * plane;
                data[dst..dst + plane].copy_from_slice(&nchw[src..src + plane]);
            }
        }
        Self { channels, batch, height, width, data }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Value of channel `c` of sample `b` at spatial offset `p`.
    pub fn at(&self, c: usize, b: usize, p: usize) -> T {
        self.data[(c * self.batch + b) * self.plane() + p]
    }

    /// Features of sample `b`, flattened channel-major then row then column.
    pub fn sample(&self, b: usize) -> Vec<T> {
        let plane = self.plane();
        let mut out = Vec::with_capacity(self.channels * plane);
        for c in 0..self.channels {
            let s = (c * self.batch + b) * plane;
            out.extend_from_slice(&self.data[s..s + plane]);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Activation<U> {
        Activation {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(WeightTensor::<f32>::new(vec![2, 0], vec![], 0).is_err());
        assert!(WeightTensor::<f32>::new(vec![2, 3], vec![0.0; 5], 0).is_err());
        let w = WeightTensor::<f32>::new(vec![2, 3, 1, 1], vec![0.0; 6], 4).unwrap();
        assert_eq!((w.rows(), w.cols()), (2, 3));
    }

    #[test]
    fn nchw_conversion_keeps_samples_intact() {
        let nchw: Vec<f32> = (0..2 * 3 * 2 * 2).map(|v| v as f32).collect();
        let a = Activation::from_nchw(2, 3, 2, 2, &nchw);
        assert_eq!(a.sample(0), nchw[..12].to_vec());
        assert_eq!(a.sample(1), nchw[12..].to_vec());
        assert_eq!(a.at(1, 1, 3), 19.0);
    }
}
