//! Quantization to memristor levels by distillation from a full-precision
//! teacher, training full-precision shadow weights through a
//! straight-through estimator.

use serde::{Deserialize, Serialize};

use crate::admm::{quantize_network, QuantScheme};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::log_softmax_columns;
use crate::mask::PruneMask;
use crate::network::Network;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::scalar::Scalar;
use crate::tensor::Activation;
use crate::train::{evaluate, EpochOrder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight of the teacher term; `0` is plain cross-entropy.
    pub balance: f64,
    pub temperature: f64,
    /// Settings of the shadow-weight optimizer, including `epochs`.
    pub optimizer: OptimizerConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { balance: 0.9, temperature: 4.0, optimizer: OptimizerConfig { learning_rate: 1e-4, ..Default::default() } }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Temperature(self.temperature));
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return Err(Error::Config(format!("distillation balance must lie in [0, 1], got {}", self.balance)));
        }
        self.optimizer.validate()
    }
}

/// `(1 - s) CE(p_s, y) + s T^2 KL(softmax(p_t / T) || softmax(p_s / T))`,
/// averaged over the batch, and its gradient with respect to the student
/// logits.
pub fn distill_loss<T: Scalar>(
    student: &Activation<T>,
    teacher: &Activation<T>,
    labels: &[usize],
    balance: f64,
    temperature: f64,
) -> Result<(f64, Activation<T>)> {
    if !(temperature > 0.0) {
        return Err(Error::Temperature(temperature));
    }
    if student.channels != teacher.channels {
        return Err(Error::ClassMismatch { student: student.channels, teacher: teacher.channels });
    }
    let (classes, batch) = (student.channels, student.batch);
    if teacher.batch != batch || labels.len() != batch {
        return Err(Error::Shape { layer: 0, detail: "logits and labels disagree on batch size".into() });
    }
    let log_s = log_softmax_columns(student, 1.0);
    let log_st = log_softmax_columns(student, temperature);
    let log_tt = log_softmax_columns(teacher, temperature);
    let inv = 1.0 / batch as f64;
    let mut grad = Activation::zeros(classes, batch, 1, 1);
    let (mut ce, mut kl) = (0.0, 0.0);
    for (b, &y) in labels.iter().enumerate() {
        ce -= log_s[y * batch + b];
        for c in 0..classes {
            let i = c * batch + b;
            let pt = log_tt[i].exp();
            if pt > 0.0 {
                kl += pt * (log_tt[i] - log_st[i]);
            }
            let hard = log_s[i].exp() - if c == y { 1.0 } else { 0.0 };
            let soft = temperature * (log_st[i].exp() - pt);
            grad.data[i] = T::from_f64_lossy(((1.0 - balance) * hard + balance * soft) * inv);
        }
    }
    let loss = ((1.0 - balance) * ce + balance * temperature * temperature * kl) * inv;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillReport {
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Accuracy of the quantized student after each epoch, when an evaluation
    /// set was given.
    pub epoch_accuracy: Vec<f64>,
}

/// Logits of `net` for every sample, as a `classes x len` row-major buffer.
fn all_logits<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<Vec<f64>> {
    let classes = net.classes();
    let n = data.len();
    let mut out = vec![0.0; classes * n];
    for chunk in data.sequential_batches(256) {
        let (x, _) = data.batch::<T>(&chunk);
        let logits = net.logits(&x)?;
        for (b, &i) in chunk.iter().enumerate() {
            for c in 0..classes {
                out[c * n + i] = logits.data[c * chunk.len() + b].as_f64();
            }
        }
    }
    Ok(out)
}

/// Trains shadow weights initialized from `student` so that their projection
/// onto `schemes` matches the teacher, and returns that projection.
///
/// Every step the shadow weights are quantized, the loss is evaluated and
/// backpropagated through the quantized copy, and the gradient is applied to
/// the shadow weights wherever they lie within the level range. Pruned
/// positions stay zero throughout.
pub fn distill_quantize<T: Scalar>(
    student: &Network<T>,
    mask: &PruneMask,
    teacher: &Network<T>,
    schemes: &[QuantScheme],
    data: &Dataset,
    cfg: &DistillConfig,
    eval: Option<&Dataset>,
) -> Result<(Network<T>, DistillReport)> {
    cfg.validate()?;
    if student.classes() != teacher.classes() {
        return Err(Error::ClassMismatch { student: student.classes(), teacher: teacher.classes() });
    }
    if teacher.input_shape() != student.input_shape() {
        return Err(Error::Shape { layer: 0, detail: "teacher and student inputs differ".into() });
    }
    let mut shadow = student.clone();
    mask.apply(&mut shadow);
    let mut report = DistillReport::default();
    let opt_cfg = &cfg.optimizer;
    if opt_cfg.epochs > 0 && data.is_empty() {
        return Err(Error::Dataset("distillation set is empty".into()));
    }

    let teacher_logits = if opt_cfg.epochs > 0 { all_logits(teacher, data)? } else { Vec::new() };
    let classes = student.classes();
    let n = data.len();
    let mut opt = Optimizer::new(opt_cfg, &shadow);
    let mut order = EpochOrder::new(n, opt_cfg.seed);
    for epoch in 0..opt_cfg.epochs {
        let idx = order.next_epoch().to_vec();
        let (mut sum, mut batches) = (0.0, 0usize);
        for (step, chunk) in idx.chunks(opt_cfg.batch_size).enumerate() {
            let mut quantized = shadow.clone();
            quantize_network(&mut quantized, schemes, mask)?;
            let (x, y) = data.batch::<T>(chunk);
            let fwd = quantized.forward(&x, true)?;
            let mut t = Activation::zeros(classes, chunk.len(), 1, 1);
            for (b, &i) in chunk.iter().enumerate() {
                for c in 0..classes {
                    t.data[c * chunk.len() + b] = T::from_f64_lossy(teacher_logits[c * n + i]);
                }
            }
            let (loss, dlogits) = distill_loss(fwd.logits(), &t, &y, cfg.balance, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let mut grads = quantized.backward(&fwd, &dlogits)?;
            // straight-through: identity inside the level range, zero outside
            for (((w, _), g), q) in shadow.weighted().zip(grads.weights.iter_mut()).zip(schemes) {
                for (gi, wi) in g.iter_mut().zip(&w.values) {
                    if wi.as_f64().abs() > q.memr_max {
                        *gi = T::zero();
                    }
                }
            }
            mask.mask_gradients(&mut grads);
            opt.step(&mut shadow, &grads);
            mask.apply(&mut shadow);
            sum += loss;
            batches += 1;
        }
        report.loss_curve.push(sum / batches.max(1) as f64);
        opt.decay();
        if let Some(eval) = eval {
            let mut q = shadow.clone();
            quantize_network(&mut q, schemes, mask)?;
            report.epoch_accuracy.push(evaluate(&q, eval)?);
        }
    }
    quantize_network(&mut shadow, schemes, mask)?;
    Ok((shadow, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Activation<f64> {
        Activation::from_nchw(1, v.len(), 1, 1, v)
    }

    #[test]
    fn hand_case() {
        // CE = ln 2, KL((3/4, 1/4) || (1/2, 1/2)) = 3/4 ln(3/2) - 1/4 ln 2,
        // so the loss is 3/8 ln 2 + 3/8 ln(3/2) = 3/8 ln 3.
        let (loss, _) = distill_loss(&col(&[0.0, 0.0]), &col(&[3f64.ln(), 0.0]), &[0], 0.5, 1.0).unwrap();
        assert!((loss - 0.375 * 3f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn zero_balance_is_plain_cross_entropy() {
        let s = col(&[0.3, -1.2, 2.0]);
        let t = col(&[5.0, 0.0, 0.0]);
        let (a, ga) = distill_loss(&s, &t, &[1], 0.0, 4.0).unwrap();
        let (b, gb) = crate::loss::softmax_cross_entropy(&s, &[1]);
        assert!((a - b).abs() < 1e-15);
        for (x, y) in ga.data.iter().zip(&gb.data) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_logits_and_full_balance_cost_nothing() {
        let s = col(&[0.3, -1.2, 2.0]);
        let (loss, g) = distill_loss(&s, &s, &[0], 1.0, 3.0).unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(g.data.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn bad_temperature_and_class_mismatch() {
        let s = col(&[0.0, 1.0]);
        assert!(matches!(distill_loss(&s, &s, &[0], 0.5, 0.0), Err(Error::Temperature(_))));
        assert!(matches!(distill_loss(&s, &col(&[0.0, 1.0, 2.0]), &[0], 0.5, 1.0), Err(Error::ClassMismatch { .. })));
    }
}
