//! Memristor state-level sets and nearest-level projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LayerMask;
use crate::scalar::Scalar;
use crate::tensor::WeightTensor;

/// Admissible weight values of one layer.
///
/// For device-derived schemes the positive half holds `2^bits` uniformly
/// spaced magnitudes from `memr_min` to `memr_max`; the sign is carried by a
/// separate (differential) device plane, so the full set has `2^(bits+1)`
/// entries. All values are exactly representable in `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantScheme {
    pub bits: u32,
    pub memr_min: f64,
    pub memr_max: f64,
    /// Sorted ascending, symmetric about zero.
    pub levels: Vec<f64>,
}

fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

impl QuantScheme {
    /// Uniform magnitude grid between `memr_max / on_off_ratio` and `memr_max`.
    pub fn memristor(bits: u32, memr_max: f64, on_off_ratio: f64) -> Result<Self> {
        if !(1..=16).contains(&bits) {
            return Err(Error::Config(format!("bits must lie in 1..=16, got {bits}")));
        }
        if !(memr_max > 0.0 && memr_max.is_finite()) || !(on_off_ratio > 1.0) {
            return Err(Error::Config(format!(
                "need memr_max > 0 and on/off ratio > 1, got {memr_max} and {on_off_ratio}"
            )));
        }
        let memr_max = f32_exact(memr_max);
        let memr_min = f32_exact(memr_max / on_off_ratio);
        let count = 1usize << bits;
        let step = (memr_max - memr_min) / (count - 1) as f64;
        let mut mags: Vec<f64> = (0..count).map(|k| f32_exact(memr_min + k as f64 * step)).collect();
        mags[count - 1] = memr_max;
        let mut levels: Vec<f64> = mags.iter().rev().map(|m| -m).collect();
        levels.extend(&mags);
        Ok(Self { bits, memr_min, memr_max, levels })
    }

    /// Scheme for a (pruned) layer: the largest retained magnitude maps to
    /// `memr_max`.
    pub fn for_layer<T: Scalar>(w: &WeightTensor<T>, mask: &LayerMask, bits: u32, on_off_ratio: f64) -> Result<Self> {
        let max = w
            .values
            .iter()
            .zip(&mask.weights)
            .filter(|(_, &k)| k)
            .map(|(v, _)| v.as_f64().abs())
            .fold(0.0, f64::max);
        Self::memristor(bits, if max > 0.0 { max } else { 1.0 }, on_off_ratio)
    }

    /// Arbitrary symmetric level set.
    pub fn from_levels(mut levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::EmptyLevels);
        }
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let n = levels.len();
        if (0..n).any(|i| levels[i] != -levels[n - 1 - i]) {
            return Err(Error::Config("level set must be symmetric about zero".into()));
        }
        let memr_max = levels[n - 1].abs();
        let memr_min = levels.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        Ok(Self { bits: 0, memr_min, memr_max, levels })
    }

    /// Positive half of the level set, ascending.
    pub fn magnitudes(&self) -> &[f64] {
        let first_pos = self.levels.partition_point(|&l| l <= 0.0);
        &self.levels[first_pos..]
    }

    /// Nearest admissible level. At an exact midpoint the level of larger
    /// magnitude wins; between `-x` and `+x` the positive one wins.
    pub fn nearest(&self, v: f64) -> f64 {
        let lv = &self.levels;
        let i = lv.partition_point(|&l| l < v);
        if i == 0 {
            return lv[0];
        }
        if i == lv.len() {
            return lv[i - 1];
        }
        let (lo, hi) = (lv[i - 1], lv[i]);
        let (dlo, dhi) = (v - lo, hi - v);
        if dlo < dhi {
            lo
        } else if dhi < dlo {
            hi
        } else if lo.abs() > hi.abs() {
            lo
        } else {
            hi
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.levels.binary_search_by(|l| l.total_cmp(&v)).is_ok()
    }

    /// Index of `|v|` within [`Self::magnitudes`], if `v` is a level.
    pub fn magnitude_index(&self, v: f64) -> Option<usize> {
        self.magnitudes().binary_search_by(|m| m.total_cmp(&v.abs())).ok()
    }
}

/// Snaps every retained weight to its nearest level; masked weights become 0.
pub fn project_quantization<T: Scalar>(
    w: &WeightTensor<T>,
    q: &QuantScheme,
    mask: &LayerMask,
) -> Result<WeightTensor<T>> {
    if q.levels.is_empty() {
        return Err(Error::EmptyLevels);
    }
    if mask.weights.len() != w.len() {
        return Err(Error::Shape {
            layer: w.layer_id,
            detail: format!("mask has {} entries, weights {}", mask.weights.len(), w.len()),
        });
    }
    let mut out = w.clone();
    for (v, &k) in out.values.iter_mut().zip(&mask.weights) {
        *v = if k { T::from_f64_lossy(q.nearest(v.as_f64())) } else { T::zero() };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memristor_grid_shape() {
        let q = QuantScheme::memristor(8, 0.5, 10.0).unwrap();
        assert_eq!(q.levels.len(), 512);
        assert_eq!(q.magnitudes().len(), 256);
        assert_eq!(q.memr_max, 0.5);
        assert_eq!(q.memr_min, 0.05f32 as f64);
        assert!(q.levels.windows(2).all(|w| w[0] < w[1]));
        assert!(q.levels.iter().all(|&l| l.abs() >= q.memr_min && l.abs() <= q.memr_max));
        assert!(q.levels.iter().all(|&l| l as f32 as f64 == l));
    }

    #[test]
    fn level_values_are_fixed_points() {
        let q = QuantScheme::memristor(4, 1.0, 10.0).unwrap();
        for &l in &q.levels {
            assert_eq!(q.nearest(l), l);
        }
    }

    #[test]
    fn midpoint_snaps_to_larger_magnitude() {
        let q = QuantScheme::from_levels(vec![-3.0, -1.0, 1.0, 3.0]).unwrap();
        assert_eq!(q.nearest(2.0), 3.0);
        assert_eq!(q.nearest(-2.0), -3.0);
        assert_eq!(q.nearest(0.0), 1.0);
        assert_eq!(q.nearest(10.0), 3.0);
        assert_eq!(q.nearest(-0.2), -1.0);
    }

    #[test]
    fn masked_weights_stay_zero_and_projection_is_idempotent() {
        let q = QuantScheme::from_levels(vec![-1.0, -0.5, 0.5, 1.0]).unwrap();
        let w = WeightTensor::new(vec![1, 4], vec![0.7, -0.2, 0.9, 0.3], 0).unwrap();
        let mut m = LayerMask::dense(1, 4);
        m.clear_col(2);
        let p = project_quantization(&w, &q, &m).unwrap();
        assert_eq!(p.values, vec![0.5, -0.5, 0.0, 0.5]);
        assert_eq!(project_quantization(&p, &q, &m).unwrap(), p);
    }

    #[test]
    fn empty_and_asymmetric_level_sets_are_rejected() {
        assert!(matches!(QuantScheme::from_levels(vec![]), Err(Error::EmptyLevels)));
        assert!(QuantScheme::from_levels(vec![-1.0, 2.0]).is_err());
        let q = QuantScheme { bits: 0, memr_min: 0.0, memr_max: 0.0, levels: vec![] };
        let w = WeightTensor::<f32>::zeros(vec![1, 1], 0);
        assert!(matches!(project_quantization(&w, &q, &LayerMask::dense(1, 1)), Err(Error::EmptyLevels)));
    }

    #[test]
    fn magnitude_index_round_trip() {
        let q = QuantScheme::memristor(8, 0.25, 10.0).unwrap();
        for (k, &m) in q.magnitudes().iter().enumerate() {
            assert_eq!(q.magnitude_index(m), Some(k));
            assert_eq!(q.magnitude_index(-m), Some(k));
        }
        assert_eq!(q.magnitude_index(0.0), None);
    }
}
