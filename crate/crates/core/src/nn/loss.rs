//! Softmax and cross-entropy with analytic gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax of a `[B, C]` tensor, computed with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.row_len();
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(vec![logits.rows(), c], out).expect("softmax keeps shape")
}

/// Mean negative log-likelihood of the true classes.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / B`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::input("cross-entropy over an empty batch"));
    }
    let weights = vec![1.0 / b as f64; b];
    weighted_cross_entropy(logits, labels, &weights)
}

/// `sum_i w_i * nll_i` and its gradient. Used to mix clean and trigger rows
/// of one batch under different loss weights.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[usize], row_weights: &[f64]) -> Result<(f64, Tensor)> {
    let (b, c) = (logits.rows(), logits.row_len());
    if logits.shape().len() != 2 || labels.len() != b || row_weights.len() != b {
        return Err(Error::input(format!(
            "cross-entropy: logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::input(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = Vec::with_capacity(b * c);
    let mut loss = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let log_z = m + z.ln();
        let w = row_weights[i];
        loss += w * (log_z - row[labels[i]]);
        for (j, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            grad.push(w * (p - onehot));
        }
    }
    Ok((loss, Tensor::new(vec![b, c], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        for c in [2usize, 3, 10] {
            let logits = Tensor::zeros(&[4, c]);
            let (loss, _) = cross_entropy(&logits, &[0, 1, 0, 1]).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let logits = Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-3);
    }

    #[test]
    fn two_class_value() {
        // Direct evaluation: -ln(e / (e + 1)) = ln(1 + e^-1).
        let expected = (1.0 + (-1.0f64).exp()).ln();
        let logits = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
        // Gradient rows sum to zero.
        assert!(grad.sum().abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::zeros(&[1, 2]);
        assert!(matches!(cross_entropy(&logits, &[2]), Err(Error::Input(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Tensor::new(vec![2, 3], vec![1.0, -2.0, 700.0, 0.1, 0.2, -0.3]).unwrap();
        let p = softmax(&logits);
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
