//! In-memory labelled image dataset.

use crate::error::{Error, Result};
use crate::network::Shape3;
use crate::scalar::Scalar;
use crate::tensor::Activation;

/// Images stored sample-major (`[N, C, H, W]`) with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape3,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: Shape3, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * shape.numel() {
            return Err(Error::Dataset(format!(
                "{} labels need {} pixels, got {}",
                labels.len(),
                labels.len() * shape.numel(),
                images.len()
            )));
        }
        Ok(Self { shape, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of classes, taken as one past the largest label.
    pub fn classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.numel();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` samples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            images: self.images[..n * self.shape.numel()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Assembles a channel-major batch for the given sample indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Activation<T>, Vec<usize>) {
        let s = self.shape;
        let plane = s.height * s.width;
        let nb = indices.len();
        let mut act = Activation::zeros(s.channels, nb, s.height, s.width);
        for (b, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            for c in 0..s.channels {
                let dst = &mut act.data[(c * nb + b) * plane..(c * nb + b + 1) * plane];
                for (d, v) in dst.iter_mut().zip(&img[c * plane..(c + 1) * plane]) {
                    *d = T::from_f64_lossy(*v as f64);
                }
            }
        }
        (act, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    /// Consecutive batches covering the whole dataset in order.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = Vec<usize>> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |s| (s..(s + bs).min(self.len())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(Dataset::new(Shape3::new(1, 2, 2), vec![0.0; 7], vec![0, 1]).is_err());
    }

    #[test]
    fn batches_cover_everything_once() {
        let d = Dataset::new(Shape3::new(1, 1, 1), (0..10).map(|v| v as f32).collect(), vec![0; 10]).unwrap();
        let all: Vec<usize> = d.sequential_batches(3).flatten().collect();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (x, _) = d.batch::<f32>(&[7, 2]);
        assert_eq!(x.data, vec![7.0, 2.0]);
    }
}
