//! Loss functions with closed-form gradients.

use crate::error::{shape_err, NdError, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a `[N, K]` batch of logits.
///
/// Returns the loss and its gradient `(softmax - onehot) / N`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let &[n, k] = logits.shape() else {
        return shape_err("softmax_xent", format!("logits must be [N, K], got {:?}", logits.shape()));
    };
    if labels.len() != n {
        return shape_err("softmax_xent", format!("{} labels for {n} rows", labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(NdError::LabelOutOfRange { label, classes: k });
    }
    let mut grad = vec![0.0; n * k];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label];
        let g = &mut grad[i * k..(i + 1) * k];
        for (gj, v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Euclidean distance between two vectors.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Contrastive loss of one pair: `y d^2 + (1 - y) max(0, margin - d)^2`.
///
/// Returns the loss and the gradients with respect to both embeddings.
/// A negative pair at zero distance has no defined direction; its
/// gradient is zero.
pub fn contrastive_loss(
    e1: &[f64],
    e2: &[f64],
    positive: bool,
    margin: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if e1.len() != e2.len() {
        return shape_err("contrastive", format!("{} vs {} dims", e1.len(), e2.len()));
    }
    if !(margin >= 0.0) {
        return Err(NdError::BadMargin(margin));
    }
    let d = euclidean(e1, e2);
    let diff: Vec<f64> = e1.iter().zip(e2).map(|(a, b)| a - b).collect();
    let (loss, scale) = if positive {
        (d * d, 2.0)
    } else if d < margin && d > 0.0 {
        let gap = margin - d;
        (gap * gap, -2.0 * gap / d)
    } else if d < margin {
        (margin * margin, 0.0)
    } else {
        (0.0, 0.0)
    };
    let g1: Vec<f64> = diff.iter().map(|v| scale * v).collect();
    let g2 = g1.iter().map(|v| -v).collect();
    Ok((loss, g1, g2))
}
