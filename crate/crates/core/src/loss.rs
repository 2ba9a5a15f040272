//! Softmax-based losses over `classes x batch` logit matrices.

use crate::scalar::Scalar;
use crate::tensor::Activation;

/// Column-wise log-softmax of `logits / temperature`, computed in f64.
pub fn log_softmax_columns<T: Scalar>(logits: &Activation<T>, temperature: f64) -> Vec<f64> {
    let (classes, batch) = (logits.channels, logits.batch);
    let mut out = vec![0.0; classes * batch];
    for b in 0..batch {
        let max = (0..classes)
            .map(|c| logits.data[c * batch + b].as_f64() / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = (0..classes)
            .map(|c| (logits.data[c * batch + b].as_f64() / temperature - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        for c in 0..classes {
            out[c * batch + b] = logits.data[c * batch + b].as_f64() / temperature - lse;
        }
    }
    out
}

/// Fused softmax + cross-entropy, averaged over the batch. Returns the loss
/// and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Activation<T>, labels: &[usize]) -> (f64, Activation<T>) {
    let (classes, batch) = (logits.channels, logits.batch);
    assert_eq!(labels.len(), batch, "one label per sample");
    let logp = log_softmax_columns(logits, 1.0);
    let mut grad = Activation::zeros(classes, batch, 1, 1);
    let inv = 1.0 / batch as f64;
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        loss -= logp[y * batch + b];
        for c in 0..classes {
            let p = logp[c * batch + b].exp();
            let t = if c == y { 1.0 } else { 0.0 };
            grad.data[c * batch + b] = T::from_f64_lossy((p - t) * inv);
        }
    }
    (loss * inv, grad)
}
