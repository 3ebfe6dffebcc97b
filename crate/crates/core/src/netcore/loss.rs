//! Softmax cross-entropy with a numerically stable log-sum-exp.

use super::NetError;
use crate::linalg::Tensor;

/// Mean negative log softmax probability of the true class, and its
/// gradient `(softmax - one_hot) / batch_size`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NetError> {
    let (n, classes) = logits.shape();
    assert_eq!(n, labels.len(), "one label per logits row");
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(NetError::BadLabel { label, classes, row });
        }
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(n, classes);
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[labels[r]];
        for c in 0..classes {
            let p = (row[c] - log_z).exp();
            let y = if c == labels[r] { 1.0 } else { 0.0 };
            grad.set(r, c, (p - y) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}
