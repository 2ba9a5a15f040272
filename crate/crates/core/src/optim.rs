//! SGD (with momentum) and Adam over a network's weights and biases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, Network};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate multiplier applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            epochs: 1,
            lr_decay: 1.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr_decay must be > 0".into()));
        }
        Ok(())
    }
}

/// Optimizer state for one network. Parameter buffers are visited in the
/// order weight, bias for each weighted layer.
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    lr: f64,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: &OptimizerConfig, net: &Network<T>) -> Self {
        let first: Vec<Vec<T>> = net
            .weighted()
            .flat_map(|(w, b)| [vec![T::zero(); w.len()], vec![T::zero(); b.len()]])
            .collect();
        let second = if cfg.kind == OptimizerKind::Adam { first.clone() } else { Vec::new() };
        Self { cfg: cfg.clone(), lr: cfg.learning_rate, step: 0, first, second }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn decay(&mut self) {
        self.lr *= self.cfg.lr_decay;
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) {
        self.step += 1;
        let lr = self.lr;
        let cfg = &self.cfg;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        let grad_bufs = grads.weights.iter().zip(&grads.biases).flat_map(|(w, b)| [w, b]);
        let params = net.weighted_mut().flat_map(|(w, b)| [&mut w.values, b]);
        for (slot, (p, g)) in params.zip(grad_bufs).enumerate() {
            match cfg.kind {
                OptimizerKind::Sgd => {
                    let mu = T::from_f64_lossy(cfg.momentum);
                    let lr = T::from_f64_lossy(lr);
                    for ((p, g), v) in p.iter_mut().zip(g).zip(self.first[slot].iter_mut()) {
                        *v = mu * *v + *g;
                        *p -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::from_f64_lossy(cfg.beta1), T::from_f64_lossy(cfg.beta2));
                    let one = T::one();
                    let step_size = T::from_f64_lossy(lr / bc1);
                    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
                    let eps = T::from_f64_lossy(cfg.eps);
                    let m = &mut self.first[slot];
                    let v = &mut self.second[slot];
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[i] = b1 * m[i] + (one - b1) * gi;
                        v[i] = b2 * v[i] + (one - b2) * gi * gi;
                        p[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs() {
        let bad_lr = OptimizerConfig { learning_rate: 0.0, ..Default::default() };
        assert!(bad_lr.validate().is_err());
        let bad_batch = OptimizerConfig { batch_size: 0, ..Default::default() };
        assert!(bad_batch.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
