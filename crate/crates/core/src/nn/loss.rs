//! Loss functions returning the mean loss and the gradient with respect
//! to their inputs.

use super::tensor::Tensor;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax of a `K x B` logit matrix; returns `B` columns of `K`.
pub fn softmax_columns(logits: &Tensor) -> Vec<Vec<f64>> {
    let (k, b) = (logits.c, logits.b);
    (0..b)
        .map(|j| {
            let col: Vec<f64> = (0..k).map(|i| logits.data[i * b + j] as f64).collect();
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = col.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Mean softmax cross-entropy of a `K x B` logit matrix against class
/// indices, and `d loss / d logits`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (k, b) = (logits.c, logits.b);
    assert_eq!(labels.len(), b, "one label per column");
    let probs = softmax_columns(logits);
    let mut grad = Tensor::zeros(k, b, 1, 1);
    let mut loss = 0.0;
    for (j, (p, &y)) in probs.iter().zip(labels).enumerate() {
        assert!(y < k, "label {y} out of range");
        let col: Vec<f64> = (0..k).map(|i| logits.data[i * b + j] as f64).collect();
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - col[y];
        for i in 0..k {
            let t = if i == y { 1.0 } else { 0.0 };
            grad.data[i * b + j] = ((p[i] - t) / b as f64) as f32;
        }
    }
    (loss / b as f64, grad)
}

/// Mean binary cross-entropy on logits against a constant target
/// (`true` = real), with gradient.
pub fn bce_with_logits(logits: &[f32], target_real: bool) -> (f64, Vec<f32>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .map(|&z| {
            let z = z as f64;
            if target_real {
                loss += softplus(-z);
                ((sigmoid(z) - 1.0) / n) as f32
            } else {
                loss += softplus(z);
                (sigmoid(z) / n) as f32
            }
        })
        .collect();
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn ce_equals_negative_log_prob() {
        let mut r = rng::rng(9);
        for _ in 0..100 {
            let logits = Tensor::from_data(2, 1, 1, 1, vec![r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]);
            let y = r.random_range(0..2);
            let (l, _) = softmax_cross_entropy(&logits, &[y]);
            let p = softmax_columns(&logits)[0][y];
            assert!((l + p.ln()).abs() < 1e-7);
        }
    }

    #[test]
    fn ce_gradient_finite_difference() {
        let logits = Tensor::from_data(2, 3, 1, 1, vec![0.3, -1.2, 2.0, 0.5, 0.1, -0.7]);
        let labels = [1, 0, 0];
        let (_, g) = softmax_cross_entropy(&logits, &labels);
        for i in 0..6 {
            let mut p = logits.clone();
            p.data[i] += 1e-3;
            let mut m = logits.clone();
            m.data[i] -= 1e-3;
            let num = (softmax_cross_entropy(&p, &labels).0 - softmax_cross_entropy(&m, &labels).0) / 2e-3;
            assert!((num - g.data[i] as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_logits_give_half_probability() {
        let p = softmax_columns(&Tensor::zeros(2, 1, 1, 1));
        assert_eq!(p[0], vec![0.5, 0.5]);
    }

    #[test]
    fn bce_limits() {
        let (l, _) = bce_with_logits(&[40.0], true);
        assert!(l < 1e-12);
        let (l, g) = bce_with_logits(&[0.0], false);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g[0] - 0.5).abs() < 1e-7);
        assert!(softplus(800.0).is_finite() && softplus(-800.0) >= 0.0);
    }
}
