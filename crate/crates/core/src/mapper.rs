//! Lowering of quantized weight matrices onto tiled memristor crossbars.
//!
//! Orientation: GEMM columns (the `k = m*kh*kw` inputs) run along the
//! word-lines (crossbar rows), filters along the bit-lines (crossbar
//! columns). Column order is channel-major, then kernel row, then kernel
//! column, identical to the im2col layout used for training.
//!
//! A weight is stored as its sign (which plane pair it lives in) and its
//! magnitude index `k`, split into base-`2^bits` digits, most significant
//! first. Digit `d` maps to `g_min + d * (g_max - g_min) / (2^bits - 1)`;
//! pruned and zero weights are off cells (conductance 0). With the level set
//! built for on/off ratio `r_off / r_on`, the weighted digit sum of
//! conductances is exactly proportional to the weight magnitude.

use serde::{Deserialize, Serialize};

use crate::admm::QuantScheme;
use crate::error::{Error, Result};
use crate::mask::{LayerMask, PruneMask};
use crate::network::{Layer, Network};
use crate::scalar::Scalar;
use crate::tensor::WeightTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareConfig {
    pub crossbar_rows: usize,
    pub crossbar_cols: usize,
    /// Ohms.
    pub r_on: f64,
    pub r_off: f64,
    pub memristor_bits: u32,
    pub memristors_per_weight: u32,
    pub adc_bits: u32,
    /// Volts applied for a full-scale input.
    pub read_voltage: f64,
    pub technology: String,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        Self {
            crossbar_rows: 128,
            crossbar_cols: 64,
            r_on: 1e6,
            r_off: 1e7,
            memristor_bits: 4,
            memristors_per_weight: 2,
            adc_bits: 8,
            read_voltage: 0.2,
            technology: "45nm".into(),
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crossbar_rows == 0 || self.crossbar_cols == 0 {
            return Err(Error::Config("crossbar dimensions must be >= 1".into()));
        }
        if !(self.r_on > 0.0 && self.r_on < self.r_off && self.r_off.is_finite()) {
            return Err(Error::Config(format!("need 0 < r_on < r_off, got {} and {}", self.r_on, self.r_off)));
        }
        if self.memristor_bits == 0 || self.memristors_per_weight == 0 || self.weight_bits() > 16 {
            return Err(Error::Config("memristor bits and count must be >= 1 with at most 16 weight bits".into()));
        }
        if self.adc_bits == 0 || self.adc_bits > 32 || !(self.read_voltage > 0.0) {
            return Err(Error::Config("adc_bits must lie in 1..=32 and read_voltage be > 0".into()));
        }
        Ok(())
    }

    pub fn weight_bits(&self) -> u32 {
        self.memristor_bits * self.memristors_per_weight
    }

    pub fn g_min(&self) -> f64 {
        1.0 / self.r_off
    }

    pub fn g_max(&self) -> f64 {
        1.0 / self.r_on
    }

    pub fn on_off_ratio(&self) -> f64 {
        self.r_off / self.r_on
    }

    /// Number of states per device.
    pub fn states(&self) -> u32 {
        1 << self.memristor_bits
    }

    /// Conductance step between adjacent device states.
    pub fn g_step(&self) -> f64 {
        (self.g_max() - self.g_min()) / (self.states() - 1) as f64
    }

    pub fn digit_conductance(&self, d: u8) -> f64 {
        if u32::from(d) + 1 == self.states() {
            self.g_max()
        } else {
            self.g_min() + f64::from(d) * self.g_step()
        }
    }

    /// Nearest device state of a (possibly perturbed) conductance.
    pub fn conductance_digit(&self, g: f64) -> u8 {
        let d = ((g - self.g_min()) / self.g_step()).round();
        d.clamp(0.0, (self.states() - 1) as f64) as u8
    }

    /// Significance of digit `d` (0 = most significant).
    pub fn digit_weight(&self, d: usize) -> f64 {
        f64::from(self.states()).powi((self.memristors_per_weight as usize - 1 - d) as i32)
    }

    /// `sum_d digit_weight(d) * g_max`: the conductance sum of the largest level.
    pub fn full_scale_sum(&self) -> f64 {
        (0..self.memristors_per_weight as usize).map(|d| self.digit_weight(d)).sum::<f64>() * self.g_max()
    }

    /// Physical planes per logical tile: positive/negative times digits.
    pub fn planes(&self) -> usize {
        2 * self.memristors_per_weight as usize
    }

    /// Level set matching this device.
    pub fn scheme(&self, memr_max: f64) -> Result<QuantScheme> {
        QuantScheme::memristor(self.weight_bits(), memr_max, self.on_off_ratio())
    }
}

/// `n x k` row-major GEMM view of a weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GemmMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
}

pub fn to_gemm_matrix<T: Scalar>(layer: &Layer<T>, index: usize) -> Result<GemmMatrix<T>> {
    let w = match layer {
        Layer::Conv(c) => &c.weight,
        Layer::Fc(f) => &f.weight,
        other => return Err(Error::UnsupportedLayer { layer: index, kind: other.kind().as_str() }),
    };
    Ok(GemmMatrix { rows: w.rows(), cols: w.cols(), values: w.values.clone() })
}

/// Inverse of [`to_gemm_matrix`] for a weight tensor of the given shape.
pub fn from_gemm_matrix<T: Scalar>(m: &GemmMatrix<T>, shape: &[usize], layer_id: usize) -> Result<WeightTensor<T>> {
    if shape.first() != Some(&m.rows) || shape[1..].iter().product::<usize>() != m.cols {
        return Err(Error::Shape { layer: layer_id, detail: format!("{}x{} matrix cannot take shape {shape:?}", m.rows, m.cols) });
    }
    WeightTensor::new(shape.to_vec(), m.values.clone(), layer_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub row_tiles: usize,
    pub col_tiles: usize,
    pub logical: usize,
    pub physical: usize,
}

/// Tiling of an `n x k` matrix (`k` along crossbar rows).
pub fn tile(n: usize, k: usize, hw: &HardwareConfig) -> TileGrid {
    let row_tiles = k.div_ceil(hw.crossbar_rows);
    let col_tiles = n.div_ceil(hw.crossbar_cols);
    let logical = row_tiles * col_tiles;
    TileGrid { row_tiles, col_tiles, logical, physical: logical * hw.planes() }
}

/// Sign and base-`2^bits` digits of a level; `None` for zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoded {
    pub negative: bool,
    pub digits: Vec<u8>,
}

pub fn encode_weight(w: f64, scheme: &QuantScheme, hw: &HardwareConfig) -> Option<Encoded> {
    if w == 0.0 {
        return None;
    }
    let mut k = scheme.magnitude_index(w)?;
    let base = hw.states() as usize;
    let m = hw.memristors_per_weight as usize;
    let mut digits = vec![0u8; m];
    for d in (0..m).rev() {
        digits[d] = (k % base) as u8;
        k /= base;
    }
    (k == 0).then_some(Encoded { negative: w < 0.0, digits })
}

pub fn decode_weight(e: &Encoded, scheme: &QuantScheme, hw: &HardwareConfig) -> f64 {
    let base = hw.states() as usize;
    let k = e.digits.iter().fold(0usize, |acc, &d| acc * base + d as usize);
    let m = scheme.magnitudes()[k];
    if e.negative {
        -m
    } else {
        m
    }
}

/// One logical tile: `rows_used x cols_used` cells on each plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub row_tile: usize,
    pub col_tile: usize,
    /// Offsets into the layer's compacted row/column lists.
    pub row_start: usize,
    pub rows_used: usize,
    pub col_start: usize,
    pub cols_used: usize,
    /// Plane `sign * digits + d` (sign 0 = positive), each row-major
    /// `rows_used x cols_used`, in siemens.
    pub planes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMap {
    /// Weighted-layer ordinal.
    pub layer: usize,
    /// GEMM dimensions of the (shrunk) layer.
    pub n: usize,
    pub k: usize,
    /// GEMM columns placed on word-lines, in order.
    pub input_rows: Vec<usize>,
    /// Filters placed on bit-lines, in order.
    pub output_cols: Vec<usize>,
    /// Weight magnitude represented by a full conductance sum.
    pub memr_max: f64,
    pub memr_min: f64,
    pub grid: TileGrid,
    pub tiles: Vec<Tile>,
}

impl LayerMap {
    pub fn cells_used(&self) -> usize {
        self.tiles.iter().map(|t| t.rows_used * t.cols_used).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossbarMap {
    pub hardware: HardwareConfig,
    pub layers: Vec<LayerMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutRow {
    pub layer: usize,
    pub logical_tiles: usize,
    pub physical_crossbars: usize,
    pub utilization_pct: f64,
}

impl CrossbarMap {
    pub fn physical_crossbars(&self) -> usize {
        self.layers.iter().map(|l| l.grid.physical).sum()
    }

    pub fn logical_tiles(&self) -> usize {
        self.layers.iter().map(|l| l.grid.logical).sum()
    }

    pub fn layout(&self) -> Vec<LayoutRow> {
        let cap = (self.hardware.crossbar_rows * self.hardware.crossbar_cols) as f64;
        self.layers
            .iter()
            .map(|l| LayoutRow {
                layer: l.layer,
                logical_tiles: l.grid.logical,
                physical_crossbars: l.grid.physical,
                utilization_pct: if l.grid.logical == 0 { 0.0 } else { 100.0 * l.cells_used() as f64 / (cap * l.grid.logical as f64) },
            })
            .collect()
    }

    /// Every conductance is 0 or within the device range.
    pub fn conductances_in_range(&self) -> bool {
        let (lo, hi) = (self.hardware.g_min(), self.hardware.g_max());
        self.layers
            .iter()
            .flat_map(|l| &l.tiles)
            .flat_map(|t| &t.planes)
            .flatten()
            .all(|&g| g == 0.0 || (lo..=hi).contains(&g))
    }

    /// Weight values recovered by decoding every cell back to digits.
    pub fn decode_layer(&self, l: usize) -> Vec<f64> {
        let hw = &self.hardware;
        let lm = &self.layers[l];
        let m = hw.memristors_per_weight as usize;
        let scheme = QuantScheme::memristor(hw.weight_bits(), lm.memr_max, hw.on_off_ratio()).ok();
        let mut out = vec![0.0; lm.n * lm.k];
        for t in &lm.tiles {
            for r in 0..t.rows_used {
                for c in 0..t.cols_used {
                    let cell = r * t.cols_used + c;
                    let k = lm.input_rows[t.row_start + r];
                    let f = lm.output_cols[t.col_start + c];
                    for sign in 0..2 {
                        let gs: Vec<f64> = (0..m).map(|d| t.planes[sign * m + d][cell]).collect();
                        if gs.iter().all(|&g| g == 0.0) {
                            continue;
                        }
                        let e = Encoded { negative: sign == 1, digits: gs.iter().map(|&g| hw.conductance_digit(g)).collect() };
                        if let Some(s) = &scheme {
                            out[f * lm.k + k] = decode_weight(&e, s, hw);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Builds the crossbar layout of every weighted layer. Only filters and
/// GEMM columns with at least one retained weight occupy crossbar space.
pub fn map_weights<T: Scalar>(
    net: &Network<T>,
    mask: &PruneMask,
    schemes: &[QuantScheme],
    hw: &HardwareConfig,
) -> Result<CrossbarMap> {
    hw.validate()?;
    if schemes.len() != net.num_weighted() || mask.layers.len() != net.num_weighted() {
        return Err(Error::Config("one scheme and one mask per weighted layer required".into()));
    }
    let levels = 1usize << hw.weight_bits();
    let mut layers = Vec::with_capacity(schemes.len());
    for (l, (((w, _), m), q)) in net.weighted().zip(&mask.layers).zip(schemes).enumerate() {
        if q.magnitudes().len() != levels {
            return Err(Error::Config(format!(
                "layer {l}: scheme has {} magnitudes, hardware encodes {levels}",
                q.magnitudes().len()
            )));
        }
        let ratio = q.memr_max / q.memr_min;
        if ((ratio - hw.on_off_ratio()) / hw.on_off_ratio()).abs() > 1e-6 {
            return Err(Error::Config(format!("layer {l}: level range ratio {ratio} differs from device ratio")));
        }
        layers.push(map_layer(l, w, m, q, hw)?);
    }
    Ok(CrossbarMap { hardware: hw.clone(), layers })
}

fn map_layer<T: Scalar>(l: usize, w: &WeightTensor<T>, m: &LayerMask, q: &QuantScheme, hw: &HardwareConfig) -> Result<LayerMap> {
    let (n, k) = (w.rows(), w.cols());
    let input_rows = m.kept_columns();
    let output_cols = m.kept_rows();
    let grid = tile(output_cols.len(), input_rows.len(), hw);
    let digits = hw.memristors_per_weight as usize;
    let mut tiles = Vec::with_capacity(grid.logical);
    for rt in 0..grid.row_tiles {
        let row_start = rt * hw.crossbar_rows;
        let rows_used = (input_rows.len() - row_start).min(hw.crossbar_rows);
        for ct in 0..grid.col_tiles {
            let col_start = ct * hw.crossbar_cols;
            let cols_used = (output_cols.len() - col_start).min(hw.crossbar_cols);
            let mut planes = vec![vec![0.0; rows_used * cols_used]; hw.planes()];
            for r in 0..rows_used {
                let kk = input_rows[row_start + r];
                for c in 0..cols_used {
                    let f = output_cols[col_start + c];
                    let idx = f * k + kk;
                    let v = if m.weights[idx] { w.values[idx].as_f64() } else { 0.0 };
                    if v == 0.0 {
                        continue;
                    }
                    let e = encode_weight(v, q, hw).ok_or(Error::Unquantized { layer: l, index: idx, value: v })?;
                    let base = usize::from(e.negative) * digits;
                    for (d, &digit) in e.digits.iter().enumerate() {
                        planes[base + d][r * cols_used + c] = hw.digit_conductance(digit);
                    }
                }
            }
            tiles.push(Tile { row_tile: rt, col_tile: ct, row_start, rows_used, col_start, cols_used, planes });
        }
    }
    Ok(LayerMap { layer: l, n, k, input_rows, output_cols, memr_max: q.memr_max, memr_min: q.memr_min, grid, tiles })
}
