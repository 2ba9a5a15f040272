//! The single JSON document configuring a pipeline run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xbprune_core::admm::SparsityConstraint;
use xbprune_core::cost::UnitCosts;
use xbprune_core::distill::DistillConfig;
use xbprune_core::mapper::HardwareConfig;
use xbprune_core::purify::PurificationConfig;
use xbprune_core::sim::NonidealityConfig;
use xbprune_core::{AdmmConfig, Granularity, LayerSpec, Network, OptimizerConfig, Shape3};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `{train,t10k}-{images-idx3,labels-idx1}-ubyte`.
    pub dir: PathBuf,
    /// Use only the first N training / test samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Test samples run through the crossbar simulator.
    pub sim_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("data"), train_limit: None, test_limit: None, sim_samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: Shape3,
    pub layers: Vec<LayerSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (input, layers) = Network::<f32>::lenet5_specs();
        Self { input, layers }
    }
}

/// Keep `keep_ratio` of the structures of weighted layer `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub layer: usize,
    pub granularity: Granularity,
    pub keep_ratio: f64,
}

/// Variation sweep run by the simulate stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub sigmas: Vec<f64>,
    pub seeds: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { sigmas: vec![0.0, 0.05, 0.1, 0.2], seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: OptimizerConfig,
    pub admm: AdmmConfig,
    pub constraints: Vec<ConstraintConfig>,
    /// Masked fine-tuning after the hard projection.
    pub retrain: OptimizerConfig,
    pub purification: PurificationConfig,
    pub distill: DistillConfig,
    pub hardware: HardwareConfig,
    pub nonideality: NonidealityConfig,
    pub sweep: SweepConfig,
    pub unit_costs: UnitCosts,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let col = |layer, keep_ratio| ConstraintConfig { layer, granularity: Granularity::Column, keep_ratio };
        Self {
            seed: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: OptimizerConfig { epochs: 5, lr_decay: 0.5, ..Default::default() },
            admm: AdmmConfig {
                rounds: 8,
                rho_init: 1e-2,
                rho_growth: 1.8,
                rho_every: Some(1),
                optimizer: OptimizerConfig { epochs: 1, learning_rate: 1e-3, batch_size: 32, ..Default::default() },
                ..Default::default()
            },
            // about 10x overall; the 400-input fc layer dominates the count
            constraints: vec![col(1, 0.5), col(2, 0.07), col(3, 0.12), col(4, 0.3)],
            retrain: OptimizerConfig { epochs: 15, learning_rate: 2e-3, lr_decay: 0.8, batch_size: 16, ..Default::default() },
            purification: PurificationConfig::default(),
            distill: DistillConfig {
                optimizer: OptimizerConfig { epochs: 1, learning_rate: 1e-4, ..Default::default() },
                // more weight on the hard labels held up better after rounding
                balance: 0.5,
                ..Default::default()
            },
            hardware: HardwareConfig::default(),
            nonideality: NonidealityConfig::default(),
            sweep: SweepConfig::default(),
            unit_costs: UnitCosts::reference_45nm(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        let net = Network::<f32>::from_specs(self.model.input, &self.model.layers)?;
        self.train.validate()?;
        self.admm.validate()?;
        self.retrain.validate()?;
        self.purification.validate()?;
        self.distill.validate()?;
        self.hardware.validate()?;
        self.nonideality.validate()?;
        self.unit_costs.validate()?;
        self.sparsity_constraints(&net)?;
        if self.sweep.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(CliError::Config("sweep sigmas must be >= 0".into()));
        }
        if self.sweep.seeds == 0 {
            return Err(CliError::Config("sweep needs at least one seed".into()));
        }
        Ok(())
    }

    pub fn sparsity_constraints(&self, net: &Network<f32>) -> Result<Vec<SparsityConstraint>> {
        self.constraints
            .iter()
            .map(|c| {
                if c.layer >= net.num_weighted() {
                    return Err(CliError::Config(format!("constraint names layer {} of {}", c.layer, net.num_weighted())));
                }
                Ok(SparsityConstraint::from_keep_ratio(net.weight(c.layer), c.layer, c.granularity, c.keep_ratio)?)
            })
            .collect()
    }

    /// Key-sorted compact JSON; the basis of [`config_hash`](Self::config_hash).
    pub fn canonical_json(&self) -> String {
        // Value maps are BTreeMaps, so keys come out sorted
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
        assert_eq!(cfg.config_hash().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<PipelineConfig>(r#"{"seed": 1, "sede": 2}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
        let err = serde_json::from_str::<PipelineConfig>(r#"{"hardware": {"rows": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 2, ..a.clone() };
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn bad_constraint_layer_is_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.constraints.push(ConstraintConfig { layer: 9, granularity: Granularity::Filter, keep_ratio: 0.5 });
        assert!(cfg.validate().is_err());
    }
}
