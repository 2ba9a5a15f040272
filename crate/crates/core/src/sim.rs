//! Inference on a crossbar map with device non-idealities: lognormal
//! process variation, geometric read drift and finite ADC resolution.
//!
//! Inputs reach the word-lines as voltages `x / max|x| * V_read`, the max
//! taken over the rows of one tile for one input vector (an ideal DAC). Each plane of each tile yields
//! bit-line currents `I = G^T V` that an ADC digitizes over the worst-case
//! range `rows_used * g_max * V_read`. Digits are combined by shift-and-add,
//! the negative planes subtracted, row tiles summed in order, and the result
//! rescaled to the weight domain before the bias and the remaining digital
//! layers are applied.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mapper::{CrossbarMap, HardwareConfig, LayerMap};
use crate::network::{argmax_columns, im2col, Layer, Network};
use crate::scalar::{gemm, Op, Scalar};
use crate::tensor::Activation;
use crate::train::accuracy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonidealityConfig {
    /// Standard deviation of the log-conductance perturbation.
    pub variation_sigma: f64,
    /// Fractional conductance change per read.
    pub drift_rate: f64,
    /// Reads after which cells are reprogrammed; 0 never refreshes.
    pub reads_between_refresh: u64,
    pub adc_bits: u32,
    pub seed: u64,
}

impl Default for NonidealityConfig {
    fn default() -> Self {
        Self { variation_sigma: 0.0, drift_rate: 0.0, reads_between_refresh: 0, adc_bits: 8, seed: 0 }
    }
}

impl NonidealityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.variation_sigma >= 0.0 && self.variation_sigma.is_finite()) || !(self.drift_rate >= 0.0) {
            return Err(Error::Config("variation_sigma and drift_rate must be >= 0".into()));
        }
        if !(1..=32).contains(&self.adc_bits) {
            return Err(Error::Config(format!("adc_bits must lie in 1..=32, got {}", self.adc_bits)));
        }
        Ok(())
    }
}

fn for_each_cell(map: &mut CrossbarMap, mut f: impl FnMut(&mut f64)) {
    for l in map.layers.iter_mut() {
        for t in l.tiles.iter_mut() {
            for p in t.planes.iter_mut() {
                p.iter_mut().filter(|g| **g != 0.0).for_each(&mut f);
            }
        }
    }
}

/// `g -> clamp(g * exp(eps))`, `eps ~ N(0, sigma^2)`, for every programmed
/// cell in a fixed traversal order. Off cells are untouched.
pub fn apply_process_variation(map: &CrossbarMap, cfg: &NonidealityConfig) -> Result<CrossbarMap> {
    cfg.validate()?;
    let mut out = map.clone();
    if cfg.variation_sigma == 0.0 {
        return Ok(out);
    }
    let (lo, hi) = (map.hardware.g_min(), map.hardware.g_max());
    let normal = Normal::new(0.0, cfg.variation_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for_each_cell(&mut out, |g| *g = (*g * normal.sample(&mut rng).exp()).clamp(lo, hi));
    Ok(out)
}

/// Reads since the last refresh.
pub fn drift_exponent(cfg: &NonidealityConfig, read_count: u64) -> u64 {
    if cfg.reads_between_refresh == 0 {
        read_count
    } else {
        read_count % cfg.reads_between_refresh
    }
}

/// `g -> clamp(g * (1 + rate)^e)` with `e` the reads since the last refresh.
pub fn apply_state_drift(map: &CrossbarMap, cfg: &NonidealityConfig, read_count: u64) -> Result<CrossbarMap> {
    cfg.validate()?;
    let mut out = map.clone();
    let e = drift_exponent(cfg, read_count);
    if cfg.drift_rate == 0.0 || e == 0 {
        return Ok(out);
    }
    let factor = (1.0 + cfg.drift_rate).powf(e as f64);
    let (lo, hi) = (map.hardware.g_min(), map.hardware.g_max());
    for_each_cell(&mut out, |g| *g = (*g * factor).clamp(lo, hi));
    Ok(out)
}

/// Uniform ADC over `[0, full_scale]` or, when `signed`, `[-full_scale, full_scale]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adc {
    pub bits: u32,
    pub full_scale: f64,
    pub signed: bool,
}

impl Adc {
    /// Largest code magnitude.
    pub fn max_code(&self) -> i64 {
        if self.signed {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    /// Current per code step.
    pub fn lsb(&self) -> f64 {
        self.full_scale / self.max_code() as f64
    }

    pub fn convert(&self, current: f64) -> i64 {
        let max = self.max_code();
        let min = if self.signed { -max } else { 0 };
        if self.full_scale <= 0.0 {
            return 0;
        }
        ((current / self.lsb()).round() as i64).clamp(min, max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvmOutput {
    /// Raw bit-line currents, amperes.
    pub currents: Vec<f64>,
    pub codes: Vec<i64>,
    /// Amperes per code.
    pub scale: f64,
}

/// Bit-line currents `G^T v` of one `rows x cols` conductance plane and their
/// ADC codes.
pub fn analog_mvm(g: &[f64], rows: usize, cols: usize, v: &[f64], adc: &Adc) -> Result<MvmOutput> {
    if v.len() != rows {
        return Err(Error::InputLength { expected: rows, got: v.len() });
    }
    let mut currents = vec![0.0; cols];
    gemm(cols, rows, 1, g, Op::T, v, Op::N, 0.0, &mut currents);
    let codes = currents.iter().map(|&i| adc.convert(i)).collect();
    Ok(MvmOutput { currents, codes, scale: adc.lsb() })
}

/// Output of one mapped layer on a `k x np` input, without bias. Every input
/// vector is scaled to the read voltage separately on each row tile.
fn analog_layer(lm: &LayerMap, hw: &HardwareConfig, adc_bits: u32, x: &[f64], np: usize) -> Vec<f64> {
    let mut out = vec![0.0; lm.n * np];
    let v_read = hw.read_voltage;
    let signed = x.iter().any(|&v| v < 0.0);
    let digits = hw.memristors_per_weight as usize;
    let to_weight = lm.memr_max / (hw.full_scale_sum() * v_read);
    for t in &lm.tiles {
        let rows = &lm.input_rows[t.row_start..t.row_start + t.rows_used];
        let mut scales = vec![0.0f64; np];
        for &k in rows {
            for (s, v) in scales.iter_mut().zip(&x[k * np..(k + 1) * np]) {
                *s = s.max(v.abs());
            }
        }
        let mut v = vec![0.0; t.rows_used * np];
        for (r, &k) in rows.iter().enumerate() {
            for ((d, s), &scale) in v[r * np..(r + 1) * np].iter_mut().zip(&x[k * np..(k + 1) * np]).zip(&scales) {
                *d = if scale > 0.0 { s / scale * v_read } else { 0.0 };
            }
        }
        let adc = Adc { bits: adc_bits, full_scale: t.rows_used as f64 * hw.g_max() * v_read, signed };
        let mut eff = vec![0.0; t.cols_used * np];
        let mut current = vec![0.0; t.cols_used * np];
        for (p, plane) in t.planes.iter().enumerate() {
            if plane.iter().all(|&g| g == 0.0) {
                continue;
            }
            gemm(t.cols_used, t.rows_used, np, plane, Op::T, &v, Op::N, 0.0, &mut current);
            let sign = if p < digits { 1.0 } else { -1.0 };
            let weight = sign * hw.digit_weight(p % digits);
            let lsb = adc.lsb();
            for (e, &i) in eff.iter_mut().zip(&current) {
                *e += weight * adc.convert(i) as f64 * lsb;
            }
        }
        for c in 0..t.cols_used {
            let f = lm.output_cols[t.col_start + c];
            for ((o, e), &scale) in out[f * np..(f + 1) * np].iter_mut().zip(&eff[c * np..(c + 1) * np]).zip(&scales) {
                *o += e * to_weight * scale;
            }
        }
    }
    out
}

/// Runs `net` with every weighted layer evaluated on `map`.
pub fn crossbar_forward(map: &CrossbarMap, net: &Network<f64>, input: &Activation<f64>, adc_bits: u32) -> Result<Vec<Activation<f64>>> {
    let hw = &map.hardware;
    let mut outs = Vec::with_capacity(net.layers().len());
    let mut x = input.clone();
    let mut wl = 0;
    for (i, layer) in net.layers().iter().enumerate() {
        let y = match layer {
            Layer::Conv(c) => {
                let (kh, kw) = c.kernel();
                let (cols, oh, ow) = im2col(&x, kh, kw, c.stride, c.padding);
                let np = x.batch * oh * ow;
                let mut data = analog_layer(&map.layers[wl], hw, adc_bits, &cols, np);
                for (f, row) in data.chunks_mut(np).enumerate() {
                    row.iter_mut().for_each(|v| *v += c.bias[f]);
                }
                wl += 1;
                Activation { channels: c.out_channels(), batch: x.batch, height: oh, width: ow, data }
            }
            Layer::Fc(f) => {
                let np = x.batch;
                let mut data = analog_layer(&map.layers[wl], hw, adc_bits, &x.data, np);
                for (o, row) in data.chunks_mut(np).enumerate() {
                    row.iter_mut().for_each(|v| *v += f.bias[o]);
                }
                wl += 1;
                Activation { channels: f.weight.rows(), batch: x.batch, height: 1, width: 1, data }
            }
            _ => net.forward_layer(i, &x),
        };
        outs.push(y.clone());
        x = y;
    }
    Ok(outs)
}

fn check_consistent(map: &CrossbarMap, net: &Network<f64>) -> Result<()> {
    if map.layers.len() != net.num_weighted() {
        return Err(Error::Config(format!("map has {} layers, network {}", map.layers.len(), net.num_weighted())));
    }
    for (l, (lm, (w, _))) in map.layers.iter().zip(net.weighted()).enumerate() {
        if lm.n != w.rows() || lm.k != w.cols() {
            return Err(Error::Shape { layer: l, detail: format!("map is {}x{}, weights {}x{}", lm.n, lm.k, w.rows(), w.cols()) });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub accuracy: f64,
    /// Accuracy of the same network evaluated digitally.
    pub software_accuracy: f64,
    /// Samples whose simulated and software predictions agree.
    pub agreement: f64,
    /// RMS difference of every weighted layer's output versus software.
    pub layer_rms: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Simulated top-1 accuracy of `net` (the quantized network `map` was built
/// from) on `data`, together with per-layer error against digital execution.
pub fn simulate_inference<T: Scalar>(map: &CrossbarMap, net: &Network<T>, data: &Dataset, cfg: &NonidealityConfig) -> Result<SimResult> {
    cfg.validate()?;
    let net = net.cast::<f64>();
    check_consistent(map, &net)?;
    let varied = apply_process_variation(map, cfg)?;
    let weighted: Vec<usize> = net.weighted_indices().to_vec();
    let mut sq = vec![0.0; weighted.len()];
    let mut count = vec![0usize; weighted.len()];
    let mut preds = Vec::with_capacity(data.len());
    let mut soft = Vec::with_capacity(data.len());
    let chunk = if cfg.drift_rate > 0.0 { 1 } else { 128 };
    for (ci, idx) in data.sequential_batches(chunk).enumerate() {
        let drifted;
        let m = if cfg.drift_rate > 0.0 {
            drifted = apply_state_drift(&varied, cfg, (ci * chunk) as u64)?;
            &drifted
        } else {
            &varied
        };
        let (x, _) = data.batch::<f64>(&idx);
        let sim = crossbar_forward(m, &net, &x, cfg.adc_bits)?;
        let reference = net.forward(&x, false)?.activations;
        for (wi, &li) in weighted.iter().enumerate() {
            for (a, b) in sim[li].data.iter().zip(&reference[li].data) {
                sq[wi] += (a - b) * (a - b);
            }
            count[wi] += sim[li].data.len();
        }
        preds.extend(argmax_columns(sim.last().unwrap()));
        soft.extend(argmax_columns(reference.last().unwrap()));
    }
    let agree = preds.iter().zip(&soft).filter(|(a, b)| a == b).count();
    Ok(SimResult {
        accuracy: accuracy(&preds, &data.labels),
        software_accuracy: accuracy(&soft, &data.labels),
        agreement: if preds.is_empty() { 1.0 } else { agree as f64 / preds.len() as f64 },
        layer_rms: sq.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { (s / c as f64).sqrt() }).collect(),
        predictions: preds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_gives_zero_codes() {
        let g = vec![1e-6, 5e-7, 2e-7, 1e-7, 3e-7, 4e-7];
        let adc = Adc { bits: 8, full_scale: 2.0 * 1e-6 * 0.2, signed: false };
        let out = analog_mvm(&g, 2, 3, &[0.0, 0.0], &adc).unwrap();
        assert!(out.currents.iter().all(|&i| i == 0.0));
        assert!(out.codes.iter().all(|&c| c == 0));
    }

    #[test]
    fn unit_input_reads_one_row() {
        let g = vec![1e-6, 5e-7, 2e-7, 1e-7, 3e-7, 4e-7];
        let adc = Adc { bits: 8, full_scale: 1e-6, signed: false };
        let out = analog_mvm(&g, 2, 3, &[0.0, 1.0], &adc).unwrap();
        assert_eq!(out.currents, vec![1e-7, 3e-7, 4e-7]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let adc = Adc { bits: 8, full_scale: 1.0, signed: false };
        assert!(matches!(analog_mvm(&[1.0; 4], 2, 2, &[1.0], &adc), Err(Error::InputLength { expected: 2, got: 1 })));
    }

    #[test]
    fn adc_codes_saturate() {
        let adc = Adc { bits: 4, full_scale: 1.5, signed: true };
        assert_eq!(adc.max_code(), 7);
        assert_eq!(adc.convert(10.0), 7);
        assert_eq!(adc.convert(-10.0), -7);
        assert_eq!(adc.convert(0.2), 1);
        let unsigned = Adc { signed: false, ..adc };
        assert_eq!(unsigned.convert(-1.0), 0);
    }

    #[test]
    fn refresh_resets_the_drift_exponent() {
        let cfg = NonidealityConfig { drift_rate: 0.01, reads_between_refresh: 100, ..Default::default() };
        assert_eq!(drift_exponent(&cfg, 250), 50);
        assert_eq!(drift_exponent(&NonidealityConfig::default(), 250), 250);
    }
}
