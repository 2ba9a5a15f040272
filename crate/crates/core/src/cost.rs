//! Linear area/power model over a crossbar map.
//!
//! Unit costs are engineering estimates supplied as data; only ratios and
//! monotonicity are meaningful, not absolute values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapper::{CrossbarMap, HardwareConfig};

/// Per-component unit costs. Every entry must be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitCosts {
    pub technology: Option<String>,
    /// One memristor cell.
    pub cell_area_um2: Option<f64>,
    pub cell_power_uw: Option<f64>,
    /// One ADC at the configured resolution.
    pub adc_area_um2: Option<f64>,
    pub adc_power_mw: Option<f64>,
    /// ADCs shared by the bit-lines of one crossbar.
    pub adcs_per_crossbar: Option<f64>,
    /// One word-line driver.
    pub driver_area_um2: Option<f64>,
    pub driver_power_uw: Option<f64>,
    /// H-tree cost per unit of `count * log2(count)` crossbars.
    pub htree_area_um2: Option<f64>,
    pub htree_power_uw: Option<f64>,
}

/// Resolved unit costs, all in mm^2 and W.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Units {
    cell_area: f64,
    cell_power: f64,
    adc_area: f64,
    adc_power: f64,
    adcs_per_crossbar: f64,
    driver_area: f64,
    driver_power: f64,
    htree_area: f64,
    htree_power: f64,
}

impl UnitCosts {
    /// Rough 45nm figures (cell, 8-bit SAR ADC, driver, H-tree segment).
    pub fn reference_45nm() -> Self {
        Self {
            technology: Some("45nm".into()),
            cell_area_um2: Some(0.0162),
            cell_power_uw: Some(0.03),
            adc_area_um2: Some(1200.0),
            adc_power_mw: Some(2.0),
            adcs_per_crossbar: Some(8.0),
            driver_area_um2: Some(2.5),
            driver_power_uw: Some(20.0),
            htree_area_um2: Some(150.0),
            htree_power_uw: Some(150.0),
        }
    }

    /// Fails on the first missing or invalid entry.
    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    fn resolve(&self) -> Result<Units> {
        fn get(v: Option<f64>, name: &str) -> Result<f64> {
            let v = v.ok_or_else(|| Error::MissingUnitCost(name.into()))?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("unit cost {name} must be finite and >= 0, got {v}")));
            }
            Ok(v)
        }
        if self.technology.is_none() {
            return Err(Error::MissingUnitCost("technology".into()));
        }
        Ok(Units {
            cell_area: get(self.cell_area_um2, "cell_area_um2")? * 1e-6,
            cell_power: get(self.cell_power_uw, "cell_power_uw")? * 1e-6,
            adc_area: get(self.adc_area_um2, "adc_area_um2")? * 1e-6,
            adc_power: get(self.adc_power_mw, "adc_power_mw")? * 1e-3,
            adcs_per_crossbar: get(self.adcs_per_crossbar, "adcs_per_crossbar")?,
            driver_area: get(self.driver_area_um2, "driver_area_um2")? * 1e-6,
            driver_power: get(self.driver_power_uw, "driver_power_uw")? * 1e-6,
            htree_area: get(self.htree_area_um2, "htree_area_um2")? * 1e-6,
            htree_power: get(self.htree_power_uw, "htree_power_uw")? * 1e-6,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub crossbars: usize,
    pub crossbar_area_mm2: f64,
    pub crossbar_power_w: f64,
    pub adc_area_mm2: f64,
    pub adc_power_w: f64,
    pub driver_area_mm2: f64,
    pub driver_power_w: f64,
}

impl LayerCost {
    pub fn area_mm2(&self) -> f64 {
        self.crossbar_area_mm2 + self.adc_area_mm2 + self.driver_area_mm2
    }

    pub fn power_w(&self) -> f64 {
        self.crossbar_power_w + self.adc_power_w + self.driver_power_w
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub crossbars: usize,
    pub htree_area_mm2: f64,
    pub htree_power_w: f64,
    pub total_area_mm2: f64,
    pub total_power_w: f64,
}

impl CostReport {
    /// Totals equal the per-layer parts plus the H-tree, to rounding.
    pub fn is_consistent(&self) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        let area: f64 = self.layers.iter().map(LayerCost::area_mm2).sum::<f64>() + self.htree_area_mm2;
        let power: f64 = self.layers.iter().map(LayerCost::power_w).sum::<f64>() + self.htree_power_w;
        close(area, self.total_area_mm2)
            && close(power, self.total_power_w)
            && self.layers.iter().map(|l| l.crossbars).sum::<usize>() == self.crossbars
    }
}

/// Area and power of every layer's physical crossbars with their ADCs and
/// word-line drivers, plus an H-tree growing as `count * log2(count)`.
pub fn estimate(map: &CrossbarMap, hw: &HardwareConfig, units: &UnitCosts) -> Result<CostReport> {
    let u = units.resolve()?;
    hw.validate()?;
    let cells = (hw.crossbar_rows * hw.crossbar_cols) as f64;
    let mut report = CostReport::default();
    for lm in &map.layers {
        let x = lm.grid.physical as f64;
        let lc = LayerCost {
            layer: lm.layer,
            crossbars: lm.grid.physical,
            crossbar_area_mm2: x * cells * u.cell_area,
            crossbar_power_w: x * cells * u.cell_power,
            adc_area_mm2: x * u.adcs_per_crossbar * u.adc_area,
            adc_power_w: x * u.adcs_per_crossbar * u.adc_power,
            driver_area_mm2: x * hw.crossbar_rows as f64 * u.driver_area,
            driver_power_w: x * hw.crossbar_rows as f64 * u.driver_power,
        };
        report.crossbars += lc.crossbars;
        report.layers.push(lc);
    }
    let n = report.crossbars as f64;
    let tree = if n > 1.0 { n * n.log2() } else { 0.0 };
    report.htree_area_mm2 = tree * u.htree_area;
    report.htree_power_w = tree * u.htree_power;
    report.total_area_mm2 = report.layers.iter().map(LayerCost::area_mm2).sum::<f64>() + report.htree_area_mm2;
    report.total_power_w = report.layers.iter().map(LayerCost::power_w).sum::<f64>() + report.htree_power_w;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::{tile, LayerMap};

    fn map_with(counts: &[(usize, usize)]) -> CrossbarMap {
        let hw = HardwareConfig::default();
        let layers = counts
            .iter()
            .enumerate()
            .map(|(l, &(n, k))| LayerMap {
                layer: l,
                n,
                k,
                input_rows: (0..k).collect(),
                output_cols: (0..n).collect(),
                memr_max: 1.0,
                memr_min: 0.1,
                grid: tile(n, k, &hw),
                tiles: vec![],
            })
            .collect();
        CrossbarMap { hardware: hw, layers }
    }

    #[test]
    fn empty_map_costs_nothing() {
        let r = estimate(&map_with(&[]), &HardwareConfig::default(), &UnitCosts::reference_45nm()).unwrap();
        assert_eq!((r.total_area_mm2, r.total_power_w, r.crossbars), (0.0, 0.0, 0));
        assert!(r.is_consistent());
    }

    #[test]
    fn missing_entry_is_named() {
        let mut u = UnitCosts::reference_45nm();
        u.adc_power_mw = None;
        let err = estimate(&map_with(&[(10, 10)]), &HardwareConfig::default(), &u).unwrap_err();
        assert!(matches!(err, Error::MissingUnitCost(ref s) if s == "adc_power_mw"));
    }

    #[test]
    fn more_crossbars_cost_more() {
        let hw = HardwareConfig::default();
        let u = UnitCosts::reference_45nm();
        let small = estimate(&map_with(&[(64, 128), (10, 84)]), &hw, &u).unwrap();
        let big = estimate(&map_with(&[(120, 400), (10, 84)]), &hw, &u).unwrap();
        assert!(big.total_area_mm2 > small.total_area_mm2);
        assert!(big.total_power_w > small.total_power_w);
        assert!(big.is_consistent() && small.is_consistent());
    }
}
