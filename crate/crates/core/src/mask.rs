//! Retention masks over the GEMM view (`filters x columns`) of every
//! weighted layer.

use serde::{Deserialize, Serialize};

use crate::network::{Gradients, Network};
use crate::scalar::Scalar;

/// Unit of structured sparsity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One row of the GEMM view: a whole conv filter or fc output neuron.
    Filter,
    /// All GEMM columns belonging to one conv input channel.
    Channel,
    /// One GEMM column: a single (channel, kernel row, kernel col) position
    /// across all filters, or one fc input.
    Column,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Filter => "filter",
            Granularity::Channel => "channel",
            Granularity::Column => "column",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`; `true` means retained.
    pub weights: Vec<bool>,
    /// One flag per filter.
    pub biases: Vec<bool>,
}

impl LayerMask {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weights: vec![true; rows * cols], biases: vec![true; rows] }
    }

    pub fn retained(&self) -> usize {
        self.weights.iter().filter(|&&k| k).count()
    }

    pub fn row_kept(&self, r: usize) -> bool {
        self.weights[r * self.cols..(r + 1) * self.cols].iter().any(|&k| k)
    }

    pub fn col_kept(&self, c: usize) -> bool {
        (0..self.rows).any(|r| self.weights[r * self.cols + c])
    }

    pub fn kept_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&r| self.row_kept(r)).collect()
    }

    pub fn kept_columns(&self) -> Vec<usize> {
        (0..self.cols).filter(|&c| self.col_kept(c)).collect()
    }

    /// Channels (groups of `width` consecutive columns) with any retained entry.
    pub fn kept_channels(&self, width: usize) -> Vec<usize> {
        (0..self.cols / width)
            .filter(|&ch| (ch * width..(ch + 1) * width).any(|c| self.col_kept(c)))
            .collect()
    }

    pub fn clear_row(&mut self, r: usize) {
        self.weights[r * self.cols..(r + 1) * self.cols].iter_mut().for_each(|k| *k = false);
        self.biases[r] = false;
    }

    pub fn clear_col(&mut self, c: usize) {
        for r in 0..self.rows {
            self.weights[r * self.cols + c] = false;
        }
    }

    /// True when every structure of the given granularity is entirely kept or
    /// entirely removed. `channel_width` is the column count per channel.
    pub fn is_consistent(&self, granularity: Granularity, channel_width: usize) -> bool {
        let uniform = |cells: &mut dyn Iterator<Item = bool>| {
            let v: Vec<bool> = cells.collect();
            v.iter().all(|&k| k) || v.iter().all(|&k| !k)
        };
        match granularity {
            Granularity::Filter => (0..self.rows).all(|r| uniform(&mut self.weights[r * self.cols..(r + 1) * self.cols].iter().copied())),
            Granularity::Column => (0..self.cols).all(|c| uniform(&mut (0..self.rows).map(|r| self.weights[r * self.cols + c]))),
            Granularity::Channel => (0..self.cols / channel_width.max(1)).all(|ch| {
                uniform(&mut (0..self.rows).flat_map(|r| {
                    (ch * channel_width..(ch + 1) * channel_width).map(move |c| (r, c))
                })
                .map(|(r, c)| self.weights[r * self.cols + c]))
            }),
        }
    }
}

/// Per-layer retention masks, indexed by weighted-layer ordinal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layers: Vec<LayerMask>,
}

impl PruneMask {
    pub fn dense<T: Scalar>(net: &Network<T>) -> Self {
        Self { layers: net.weighted().map(|(w, _)| LayerMask::dense(w.rows(), w.cols())).collect() }
    }

    /// Mask keeping exactly the nonzero weights (biases all kept).
    pub fn from_nonzero<T: Scalar>(net: &Network<T>) -> Self {
        Self {
            layers: net
                .weighted()
                .map(|(w, _)| LayerMask {
                    rows: w.rows(),
                    cols: w.cols(),
                    weights: w.values.iter().map(|v| !v.is_zero()).collect(),
                    biases: vec![true; w.rows()],
                })
                .collect(),
        }
    }

    pub fn retained(&self) -> usize {
        self.layers.iter().map(LayerMask::retained).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    /// Total weights over retained weights.
    pub fn compression_ratio(&self) -> f64 {
        self.total() as f64 / self.retained().max(1) as f64
    }

    /// Zeroes every masked weight and bias of `net`.
    pub fn apply<T: Scalar>(&self, net: &mut Network<T>) {
        for ((w, b), m) in net.weighted_mut().zip(&self.layers) {
            for (v, &k) in w.values.iter_mut().zip(&m.weights) {
                if !k {
                    *v = T::zero();
                }
            }
            for (v, &k) in b.iter_mut().zip(&m.biases) {
                if !k {
                    *v = T::zero();
                }
            }
        }
    }

    pub fn mask_gradients<T: Scalar>(&self, grads: &mut Gradients<T>) {
        for ((gw, gb), m) in grads.weights.iter_mut().zip(grads.biases.iter_mut()).zip(&self.layers) {
            for (g, &k) in gw.iter_mut().zip(&m.weights) {
                if !k {
                    *g = T::zero();
                }
            }
            for (g, &k) in gb.iter_mut().zip(&m.biases) {
                if !k {
                    *g = T::zero();
                }
            }
        }
    }

    /// True when no masked position of `net` holds a nonzero weight or bias.
    pub fn is_respected_by<T: Scalar>(&self, net: &Network<T>) -> bool {
        net.weighted().zip(&self.layers).all(|((w, b), m)| {
            w.values.iter().zip(&m.weights).all(|(v, &k)| k || v.is_zero())
                && b.iter().zip(&m.biases).all(|(v, &k)| k || v.is_zero())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistency_per_granularity() {
        let mut m = LayerMask::dense(2, 4);
        m.clear_col(1);
        assert!(m.is_consistent(Granularity::Column, 2));
        assert!(!m.is_consistent(Granularity::Filter, 2));
        assert!(!m.is_consistent(Granularity::Channel, 2));
        m.clear_col(0);
        assert!(m.is_consistent(Granularity::Channel, 2));
        assert_eq!(m.kept_channels(2), vec![1]);
        m.clear_row(0);
        assert_eq!(m.kept_rows(), vec![1]);
        assert_eq!(m.retained(), 2);
    }
}
