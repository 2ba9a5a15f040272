//! ADMM-regularized structured pruning and level quantization.
//!
//! Each round runs a few epochs of SGD on the loss plus the quadratic
//! augmented-Lagrangian terms, projects `W + U` onto the sparsity set and
//! `W + V` onto the level set, then updates the scaled duals.

pub mod quant;
pub mod sparsity;

use serde::{Deserialize, Serialize};

pub use quant::{project_quantization, QuantScheme};
pub use sparsity::{
    channel_width, nonzero_structures, project_sparsity, sparsity_mask, structure_count, structure_norms_sq,
    SparsityConstraint,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::{LayerMask, PruneMask};
use crate::network::{Gradients, Network};
use crate::optim::OptimizerConfig;
use crate::scalar::Scalar;
use crate::train::{train, Regularizer, TrainOptions};

/// Which constraint sets are enforced during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdmmPhase {
    Sparsity,
    Quantization,
    Joint,
}

impl AdmmPhase {
    fn sparsity(self) -> bool {
        matches!(self, AdmmPhase::Sparsity | AdmmPhase::Joint)
    }
    fn quantization(self) -> bool {
        matches!(self, AdmmPhase::Quantization | AdmmPhase::Joint)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmConfig {
    /// Number of ADMM rounds `K`.
    pub rounds: usize,
    pub rho_init: f64,
    pub rho_growth: f64,
    /// Rounds between penalty increases; `None` means `max(1, K / 3)`.
    pub rho_every: Option<usize>,
    pub phase: AdmmPhase,
    /// Settings of the W-update; `epochs` is the per-round sub-epoch count `E`.
    pub optimizer: OptimizerConfig,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rounds: 6,
            rho_init: 1e-3,
            rho_growth: 2.0,
            rho_every: None,
            phase: AdmmPhase::Sparsity,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_init > 0.0) || !(self.rho_growth >= 1.0) {
            return Err(Error::Config("need rho_init > 0 and rho_growth >= 1".into()));
        }
        if self.rho_every == Some(0) {
            return Err(Error::Config("rho_every must be >= 1".into()));
        }
        self.optimizer.validate()
    }

    fn rho_interval(&self) -> usize {
        self.rho_every.unwrap_or((self.rounds / 3).max(1))
    }
}

/// Auxiliary copies and scaled duals for one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub y: Vec<T>,
    pub z: Vec<T>,
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub rho: f64,
    /// Whether the `Y/U` (sparsity) term is active for this layer.
    pub sparsity: bool,
    /// Whether the `Z/V` (quantization) term is active for this layer.
    pub quantization: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState<T> {
    pub layers: Vec<LayerState<T>>,
    pub iteration: usize,
}

impl<T: Scalar> AdmmState<T> {
    /// `Y = Z = W`, zero duals, all terms inactive.
    pub fn new(net: &Network<T>, rho: f64) -> Self {
        let layers = net
            .weighted()
            .map(|(w, _)| LayerState {
                y: w.values.clone(),
                z: w.values.clone(),
                u: vec![T::zero(); w.len()],
                v: vec![T::zero(); w.len()],
                rho,
                sparsity: false,
                quantization: false,
            })
            .collect();
        Self { layers, iteration: 0 }
    }

    fn check_shapes(&self, net: &Network<T>) -> Result<()> {
        if self.layers.len() != net.num_weighted() {
            return Err(Error::Shape {
                layer: 0,
                detail: format!("state has {} layers, network {}", self.layers.len(), net.num_weighted()),
            });
        }
        for (l, ((w, _), s)) in net.weighted().zip(&self.layers).enumerate() {
            let n = w.len();
            if s.y.len() != n || s.z.len() != n || s.u.len() != n || s.v.len() != n {
                return Err(Error::Shape { layer: l, detail: "ADMM state does not match weights".into() });
            }
        }
        Ok(())
    }
}

/// `sum_i rho_i/2 (|W_i - Y_i + U_i|^2 + |W_i - Z_i + V_i|^2)` over the
/// active terms, and its gradient with respect to the weights.
pub fn admm_penalty<T: Scalar>(net: &Network<T>, state: &AdmmState<T>) -> Result<(f64, Gradients<T>)> {
    state.check_shapes(net)?;
    let mut grads = Gradients::zeros_like(net);
    let value = accumulate_penalty(net, state, &mut grads);
    Ok((value, grads))
}

fn accumulate_penalty<T: Scalar>(net: &Network<T>, state: &AdmmState<T>, grads: &mut Gradients<T>) -> f64 {
    let mut total = 0.0;
    for (((w, _), s), g) in net.weighted().zip(&state.layers).zip(grads.weights.iter_mut()) {
        let rho = T::from_f64_lossy(s.rho);
        let mut sq = 0.0;
        for (target, dual, on) in [(&s.y, &s.u, s.sparsity), (&s.z, &s.v, s.quantization)] {
            if !on {
                continue;
            }
            for i in 0..w.len() {
                let d = w.values[i] - target[i] + dual[i];
                sq += d.as_f64() * d.as_f64();
                g[i] += rho * d;
            }
        }
        total += 0.5 * s.rho * sq;
    }
    total
}

impl<T: Scalar> Regularizer<T> for AdmmState<T> {
    fn penalty(&self, net: &Network<T>) -> f64 {
        let mut scratch = Gradients::zeros_like(net);
        accumulate_penalty(net, self, &mut scratch)
    }

    fn add_gradient(&self, net: &Network<T>, grads: &mut Gradients<T>) {
        accumulate_penalty(net, self, grads);
    }
}

/// Per-round, per-layer primal residuals. `None` when the term is inactive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub round: usize,
    pub layer: usize,
    pub w_minus_y: Option<f64>,
    pub w_minus_z: Option<f64>,
}

pub struct AdmmOutcome<T> {
    pub state: AdmmState<T>,
    /// Structure mask of the final sparsity projection of `W`.
    pub mask: PruneMask,
    pub history: Vec<ResidualRecord>,
    /// Mean training loss of every sub-epoch, in order.
    pub loss_curve: Vec<f64>,
}

impl<T> AdmmOutcome<T> {
    /// `sqrt(sum_layers |W - Y|^2)` per round.
    pub fn total_sparsity_residuals(&self) -> Vec<f64> {
        total_residuals(&self.history, |r| r.w_minus_y)
    }

    pub fn total_quantization_residuals(&self) -> Vec<f64> {
        total_residuals(&self.history, |r| r.w_minus_z)
    }
}

fn total_residuals(history: &[ResidualRecord], pick: impl Fn(&ResidualRecord) -> Option<f64>) -> Vec<f64> {
    let rounds = history.iter().map(|r| r.round + 1).max().unwrap_or(0);
    let mut acc = vec![0.0; rounds];
    for r in history {
        if let Some(v) = pick(r) {
            acc[r.round] += v * v;
        }
    }
    acc.into_iter().map(f64::sqrt).collect()
}

fn constraint_lookup(net_layers: usize, constraints: &[SparsityConstraint]) -> Result<Vec<Option<SparsityConstraint>>> {
    let mut out = vec![None; net_layers];
    for c in constraints {
        let slot = out
            .get_mut(c.layer)
            .ok_or_else(|| Error::Config(format!("constraint names layer {} of {net_layers}", c.layer)))?;
        if slot.is_some() {
            return Err(Error::Config(format!("duplicate constraint for layer {}", c.layer)));
        }
        *slot = Some(*c);
    }
    Ok(out)
}

/// Structure mask of every constrained layer of `net` (dense elsewhere),
/// intersected with `base` when given.
pub fn constraint_mask<T: Scalar>(
    net: &Network<T>,
    constraints: &[SparsityConstraint],
    base: Option<&PruneMask>,
) -> Result<PruneMask> {
    let lookup = constraint_lookup(net.num_weighted(), constraints)?;
    let mut layers = Vec::with_capacity(lookup.len());
    for (l, ((w, _), c)) in net.weighted().zip(&lookup).enumerate() {
        let mut m = match c {
            Some(c) => sparsity_mask(w, c)?,
            None => LayerMask::dense(w.rows(), w.cols()),
        };
        if let Some(b) = base {
            for (k, &bk) in m.weights.iter_mut().zip(&b.layers[l].weights) {
                *k &= bk;
            }
            for (k, &bk) in m.biases.iter_mut().zip(&b.layers[l].biases) {
                *k &= bk;
            }
        }
        layers.push(m);
    }
    Ok(PruneMask { layers })
}

fn frobenius_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x - *y).as_f64().powi(2)).sum::<f64>().sqrt()
}

fn add_into<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

/// Runs `cfg.rounds` ADMM rounds on a pretrained network, with the W-update
/// done by `cfg.optimizer.epochs` epochs of training on `data`.
///
/// `schemes` (one per weighted layer) is required when the phase enforces
/// quantization. `frozen`, when given, is kept fixed during the W-updates and
/// used as the retained set of the quantization projection.
pub fn admm_run<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    constraints: &[SparsityConstraint],
    schemes: Option<&[QuantScheme]>,
    cfg: &AdmmConfig,
    frozen: Option<&PruneMask>,
) -> Result<AdmmOutcome<T>> {
    admm_run_with(net, constraints, schemes, cfg, frozen, |net, state, round| {
        let sub = OptimizerConfig { seed: cfg.optimizer.seed.wrapping_add(round as u64), ..cfg.optimizer.clone() };
        Ok(train(net, data, &sub, TrainOptions { regularizer: Some(state), mask: frozen })?.loss_curve)
    })
}

/// ADMM with a caller-supplied W-update. `w_update(net, state, round)` must
/// (approximately) minimize the loss plus [`admm_penalty`] and returns any
/// loss values worth recording.
pub fn admm_run_with<T, F>(
    net: &mut Network<T>,
    constraints: &[SparsityConstraint],
    schemes: Option<&[QuantScheme]>,
    cfg: &AdmmConfig,
    frozen: Option<&PruneMask>,
    mut w_update: F,
) -> Result<AdmmOutcome<T>>
where
    T: Scalar,
    F: FnMut(&mut Network<T>, &AdmmState<T>, usize) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let nl = net.num_weighted();
    let lookup = constraint_lookup(nl, constraints)?;
    for (l, c) in lookup.iter().enumerate() {
        if let Some(c) = c {
            c.validate(net.weight(l))?;
        }
    }
    if cfg.phase.quantization() {
        match schemes {
            Some(s) if s.len() == nl => {}
            _ => return Err(Error::Config(format!("quantization phase needs {nl} level schemes"))),
        }
    }

    let mut state = AdmmState::new(net, cfg.rho_init);
    for (l, s) in state.layers.iter_mut().enumerate() {
        s.sparsity = cfg.phase.sparsity() && lookup[l].is_some();
        s.quantization = cfg.phase.quantization();
    }
    project_auxiliaries(net, &mut state, &lookup, schemes, frozen, true)?;

    let mut history = Vec::new();
    let mut loss_curve = Vec::new();
    let interval = cfg.rho_interval();
    for round in 0..cfg.rounds {
        let losses = w_update(net, &state, round).map_err(|e| Error::AdmmRound { round, source: Box::new(e) })?;
        loss_curve.extend(losses);

        project_auxiliaries(net, &mut state, &lookup, schemes, frozen, false)?;
        for (l, ((w, _), s)) in net.weighted().zip(state.layers.iter_mut()).enumerate() {
            if s.sparsity {
                for i in 0..w.len() {
                    s.u[i] += w.values[i] - s.y[i];
                }
            }
            if s.quantization {
                for i in 0..w.len() {
                    s.v[i] += w.values[i] - s.z[i];
                }
            }
            history.push(ResidualRecord {
                round,
                layer: l,
                w_minus_y: s.sparsity.then(|| frobenius_diff(&w.values, &s.y)),
                w_minus_z: s.quantization.then(|| frobenius_diff(&w.values, &s.z)),
            });
        }
        state.iteration += 1;
        if (round + 1) % interval == 0 {
            for s in state.layers.iter_mut() {
                s.rho *= cfg.rho_growth;
            }
        }
    }

    let mask = constraint_mask(net, constraints, frozen)?;
    Ok(AdmmOutcome { state, mask, history, loss_curve })
}

/// Y <- P(W + U), Z <- Q(W + V). With `initial` the duals are taken as zero.
fn project_auxiliaries<T: Scalar>(
    net: &Network<T>,
    state: &mut AdmmState<T>,
    lookup: &[Option<SparsityConstraint>],
    schemes: Option<&[QuantScheme]>,
    frozen: Option<&PruneMask>,
    initial: bool,
) -> Result<()> {
    for (l, ((w, _), s)) in net.weighted().zip(state.layers.iter_mut()).enumerate() {
        let mut y_mask = None;
        if s.sparsity {
            let c = lookup[l].as_ref().expect("active sparsity term has a constraint");
            let mut shifted = w.clone();
            if !initial {
                shifted.values = add_into(&w.values, &s.u);
            }
            let m = sparsity_mask(&shifted, c)?;
            s.y = project_sparsity(&shifted, c)?.values;
            y_mask = Some(m);
        }
        if s.quantization {
            let q = &schemes.expect("checked by caller")[l];
            let mut shifted = w.clone();
            if !initial {
                shifted.values = add_into(&w.values, &s.v);
            }
            let m = match (&y_mask, frozen) {
                (Some(m), _) => m.clone(),
                (None, Some(f)) => f.layers[l].clone(),
                (None, None) => LayerMask::dense(w.rows(), w.cols()),
            };
            s.z = project_quantization(&shifted, q, &m)?.values;
        }
    }
    Ok(())
}

/// Final masked mapping: project every constrained layer onto its sparsity
/// set, freeze the mask, retrain with masked gradients, and (when `schemes`
/// is given) snap the retained weights onto their level sets.
pub fn hard_mask_and_retrain<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    constraints: &[SparsityConstraint],
    schemes: Option<&[QuantScheme]>,
    retrain: &OptimizerConfig,
    base: Option<&PruneMask>,
) -> Result<PruneMask> {
    let mask = constraint_mask(net, constraints, base)?;
    mask.apply(net);
    if retrain.epochs > 0 {
        train(net, data, retrain, TrainOptions { regularizer: None, mask: Some(&mask) })?;
    }
    if let Some(schemes) = schemes {
        quantize_network(net, schemes, &mask)?;
    }
    Ok(mask)
}

/// Applies [`project_quantization`] to every weighted layer.
pub fn quantize_network<T: Scalar>(net: &mut Network<T>, schemes: &[QuantScheme], mask: &PruneMask) -> Result<()> {
    if schemes.len() != net.num_weighted() {
        return Err(Error::Config(format!("{} schemes for {} layers", schemes.len(), net.num_weighted())));
    }
    for (l, q) in schemes.iter().enumerate() {
        let projected = project_quantization(net.weight(l), q, &mask.layers[l])?;
        *net.weight_mut(l) = projected;
    }
    mask.apply(net);
    Ok(())
}

/// Per-layer schemes derived from the retained weights of `net`.
pub fn layer_schemes<T: Scalar>(net: &Network<T>, mask: &PruneMask, bits: u32, on_off_ratio: f64) -> Result<Vec<QuantScheme>> {
    net.weighted()
        .zip(&mask.layers)
        .map(|((w, _), m)| QuantScheme::for_layer(w, m, bits, on_off_ratio))
        .collect()
}

/// Checks that every constrained layer has at most `alpha` nonzero structures
/// and, when `schemes` is given, that every nonzero weight is a level.
pub fn is_feasible<T: Scalar>(
    net: &Network<T>,
    constraints: &[SparsityConstraint],
    schemes: Option<&[QuantScheme]>,
) -> Result<bool> {
    for c in constraints {
        if nonzero_structures(net.weight(c.layer), c.granularity)? > c.alpha {
            return Ok(false);
        }
    }
    if let Some(schemes) = schemes {
        for ((w, _), q) in net.weighted().zip(schemes) {
            if w.values.iter().any(|v| !v.is_zero() && !q.contains(v.as_f64())) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Granularity;
    use crate::network::{Layer, Linear, Shape3};
    use crate::tensor::WeightTensor;

    fn scalar_net(w: f64) -> Network<f64> {
        let layers = vec![
            Layer::Flatten,
            Layer::Fc(Linear { weight: WeightTensor::new(vec![1, 1], vec![w], 0).unwrap(), bias: vec![0.0] }),
        ];
        Network::new(Shape3::new(1, 1, 1), layers).unwrap()
    }

    fn scalar_state(net: &Network<f64>, y: f64, u: f64, z: f64, v: f64, rho: f64) -> AdmmState<f64> {
        let mut s = AdmmState::new(net, rho);
        let l = &mut s.layers[0];
        (l.y[0], l.u[0], l.z[0], l.v[0]) = (y, u, z, v);
        l.sparsity = true;
        l.quantization = true;
        s
    }

    #[test]
    fn consensus_gives_zero_penalty_and_gradient() {
        let net = scalar_net(0.7);
        let s = scalar_state(&net, 0.7, 0.0, 0.7, 0.0, 3.0);
        let (p, g) = admm_penalty(&net, &s).unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(g.weights[0][0], 0.0);
    }

    #[test]
    fn hand_evaluated_scalar_case() {
        let net = scalar_net(2.0);
        let s = scalar_state(&net, 1.0, 0.0, 2.0, 0.0, 2.0);
        let (p, g) = admm_penalty(&net, &s).unwrap();
        assert_eq!(p, 1.0);
        assert_eq!(g.weights[0][0], 2.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = scalar_net(1.0);
        let mut s = AdmmState::new(&net, 1.0);
        s.layers[0].u.push(0.0);
        assert!(matches!(admm_penalty(&net, &s), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_rounds_is_a_no_op() {
        let mut net = scalar_net(1.5);
        let before = net.clone();
        let data = Dataset::new(Shape3::new(1, 1, 1), vec![1.0], vec![0]).unwrap();
        let c = [SparsityConstraint { layer: 0, granularity: Granularity::Column, alpha: 1 }];
        let cfg = AdmmConfig { rounds: 0, ..Default::default() };
        let out = admm_run(&mut net, &data, &c, None, &cfg, None).unwrap();
        assert_eq!(net, before);
        assert!(out.history.is_empty());
    }

    #[test]
    fn quantization_phase_requires_schemes() {
        let mut net = scalar_net(1.5);
        let data = Dataset::new(Shape3::new(1, 1, 1), vec![1.0], vec![0]).unwrap();
        let cfg = AdmmConfig { rounds: 1, phase: AdmmPhase::Quantization, ..Default::default() };
        assert!(admm_run(&mut net, &data, &[], None, &cfg, None).is_err());
    }

    #[test]
    fn duplicate_constraints_are_rejected() {
        let net = scalar_net(1.0);
        let c = SparsityConstraint { layer: 0, granularity: Granularity::Column, alpha: 1 };
        assert!(constraint_mask(&net, &[c, c], None).is_err());
        let far = SparsityConstraint { layer: 3, ..c };
        assert!(constraint_mask(&net, &[far], None).is_err());
    }
}
