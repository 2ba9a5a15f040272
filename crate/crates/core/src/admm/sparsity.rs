//! Structured sparsity constraints and their Euclidean projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Granularity, LayerMask};
use crate::scalar::Scalar;
use crate::tensor::WeightTensor;

/// At most `alpha` structures of the given granularity may be nonzero in
/// weighted layer `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityConstraint {
    pub layer: usize,
    pub granularity: Granularity,
    pub alpha: usize,
}

impl SparsityConstraint {
    /// Converts a keep ratio in `(0, 1]` into a structure count (at least 1).
    pub fn from_keep_ratio<T: Scalar>(
        w: &WeightTensor<T>,
        layer: usize,
        granularity: Granularity,
        keep_ratio: f64,
    ) -> Result<Self> {
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(Error::Config(format!("keep ratio must lie in (0, 1], got {keep_ratio}")));
        }
        let total = structure_count(w, granularity)?;
        let alpha = ((keep_ratio * total as f64).round() as usize).clamp(1, total);
        Ok(Self { layer, granularity, alpha })
    }

    pub fn validate<T: Scalar>(&self, w: &WeightTensor<T>) -> Result<()> {
        let total = structure_count(w, self.granularity)?;
        if self.alpha == 0 || self.alpha > total {
            return Err(Error::Config(format!(
                "alpha {} outside 1..={total} for layer {} ({})",
                self.alpha,
                self.layer,
                self.granularity.as_str()
            )));
        }
        Ok(())
    }
}

fn is_conv<T>(w: &WeightTensor<T>) -> bool {
    w.shape.len() == 4
}

/// GEMM columns per input channel (`kh * kw` for conv).
pub fn channel_width<T>(w: &WeightTensor<T>) -> usize {
    if is_conv(w) {
        w.shape[2] * w.shape[3]
    } else {
        1
    }
}

/// Number of structures of granularity `g` in `w`.
pub fn structure_count<T: Scalar>(w: &WeightTensor<T>, g: Granularity) -> Result<usize> {
    match g {
        Granularity::Filter => Ok(w.rows()),
        Granularity::Column => Ok(w.cols()),
        Granularity::Channel if is_conv(w) => Ok(w.shape[1]),
        Granularity::Channel => Err(Error::Granularity { layer: w.layer_id, kind: "fc", granularity: "channel" }),
    }
}

/// Squared Frobenius norm of every structure, in index order.
pub fn structure_norms_sq<T: Scalar>(w: &WeightTensor<T>, g: Granularity) -> Result<Vec<f64>> {
    let count = structure_count(w, g)?;
    let (rows, cols) = (w.rows(), w.cols());
    let cw = channel_width(w);
    let mut norms = vec![0.0; count];
    for r in 0..rows {
        for c in 0..cols {
            let v = w.values[r * cols + c].as_f64();
            let s = match g {
                Granularity::Filter => r,
                Granularity::Column => c,
                Granularity::Channel => c / cw,
            };
            norms[s] += v * v;
        }
    }
    Ok(norms)
}

/// Indices of the `alpha` largest-norm structures. Equal norms keep the lower
/// index. Returned in ascending index order.
pub fn top_structures(norms: &[f64], alpha: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(alpha).collect();
    kept.sort_unstable();
    kept
}

/// Mask retaining the structures selected by the projection onto `c`.
pub fn sparsity_mask<T: Scalar>(w: &WeightTensor<T>, c: &SparsityConstraint) -> Result<LayerMask> {
    c.validate(w)?;
    let norms = structure_norms_sq(w, c.granularity)?;
    let kept = top_structures(&norms, c.alpha);
    let (rows, cols) = (w.rows(), w.cols());
    let cw = channel_width(w);
    let mut keep = vec![false; norms.len()];
    kept.iter().for_each(|&s| keep[s] = true);
    let mut mask = LayerMask::dense(rows, cols);
    for r in 0..rows {
        for col in 0..cols {
            let s = match c.granularity {
                Granularity::Filter => r,
                Granularity::Column => col,
                Granularity::Channel => col / cw,
            };
            mask.weights[r * cols + col] = keep[s];
        }
    }
    Ok(mask)
}

/// Euclidean projection onto the structured sparsity set: keep the `alpha`
/// structures of largest l2 norm, zero the rest.
pub fn project_sparsity<T: Scalar>(w: &WeightTensor<T>, c: &SparsityConstraint) -> Result<WeightTensor<T>> {
    let mask = sparsity_mask(w, c)?;
    let mut out = w.clone();
    for (v, &k) in out.values.iter_mut().zip(&mask.weights) {
        if !k {
            *v = T::zero();
        }
    }
    Ok(out)
}

/// Number of structures of granularity `g` that hold any nonzero weight.
pub fn nonzero_structures<T: Scalar>(w: &WeightTensor<T>, g: Granularity) -> Result<usize> {
    Ok(structure_norms_sq(w, g)?.iter().filter(|&&n| n > 0.0).count())
}
