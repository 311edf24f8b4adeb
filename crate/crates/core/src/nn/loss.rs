//! Losses over batches (rows = instances). Probabilities are clipped to
//! `[PROB_CLIP, 1]` (and `1 - p` likewise for the binary loss) before logs.

use ndarray::{Array2, Zip};

pub const PROB_CLIP: f64 = 1e-12;

/// Mean over the batch of `-Σ_i y_i log p_i`.
pub fn cross_entropy(probs: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = probs.nrows().max(1) as f64;
    let mut total = 0.0;
    Zip::from(probs).and(y).for_each(|&p, &y| {
        if y != 0.0 {
            total -= y * p.clamp(PROB_CLIP, 1.0).ln();
        }
    });
    total / n
}

/// ∂(cross_entropy)/∂p. Zero where the clip is active.
pub fn cross_entropy_grad(probs: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let n = probs.nrows().max(1) as f64;
    let mut g = Array2::zeros(probs.raw_dim());
    Zip::from(&mut g).and(probs).and(y).for_each(|g, &p, &y| {
        if p > PROB_CLIP && p <= 1.0 {
            *g = -y / (p * n);
        }
    });
    g
}

/// Gradient of softmax + cross-entropy with respect to the softmax input.
pub fn softmax_cross_entropy_grad(probs: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let n = probs.nrows().max(1) as f64;
    (probs - y) / n
}

/// Two-term binary cross-entropy averaged over labels and over the batch.
pub fn binary_cross_entropy(probs: &Array2<f64>, s: &Array2<f64>) -> f64 {
    let n = probs.nrows().max(1) as f64;
    let k = probs.ncols().max(1) as f64;
    let mut total = 0.0;
    Zip::from(probs).and(s).for_each(|&p, &s| {
        let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        total -= s * p.ln() + (1.0 - s) * (1.0 - p).ln();
    });
    total / (n * k)
}

/// ∂(binary_cross_entropy)/∂p. Zero where the clip is active.
pub fn binary_cross_entropy_grad(probs: &Array2<f64>, s: &Array2<f64>) -> Array2<f64> {
    let scale = (probs.nrows().max(1) * probs.ncols().max(1)) as f64;
    let mut g = Array2::zeros(probs.raw_dim());
    Zip::from(&mut g).and(probs).and(s).for_each(|g, &p, &s| {
        if p > PROB_CLIP && p < 1.0 - PROB_CLIP {
            *g = (-(s / p) + (1.0 - s) / (1.0 - p)) / scale;
        }
    });
    g
}

/// Gradient of sigmoid + binary cross-entropy with respect to the sigmoid input.
pub fn sigmoid_bce_grad(probs: &Array2<f64>, s: &Array2<f64>) -> Array2<f64> {
    let scale = (probs.nrows().max(1) * probs.ncols().max(1)) as f64;
    (probs - s) / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::f64::consts::LN_2;

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&array![[0.0, 1.0]], &array![[0.0, 1.0]]), 0.0);
        let l = cross_entropy(&array![[0.5, 0.5]], &array![[0.0, 1.0]]);
        assert!((l - LN_2).abs() < 1e-15);
        let two = cross_entropy(&array![[0.3, 0.7], [0.3, 0.7]], &array![[1.0, 0.0], [1.0, 0.0]]);
        let one = cross_entropy(&array![[0.3, 0.7]], &array![[1.0, 0.0]]);
        assert!((two - one).abs() < 1e-15);
        // log(0) is clipped
        assert!(cross_entropy(&array![[1.0, 0.0]], &array![[0.0, 1.0]]).is_finite());
    }

    #[test]
    fn bce_values() {
        assert!(binary_cross_entropy(&array![[1.0, 0.0]], &array![[1.0, 0.0]]) < 1e-11);
        let l = binary_cross_entropy(&array![[0.5, 0.5]], &array![[1.0, 0.0]]);
        assert!((l - LN_2).abs() < 1e-15);
        // predicting all ones is penalized through the (1 - s) term
        assert!(binary_cross_entropy(&array![[1.0, 1.0]], &array![[1.0, 0.0]]) > 1.0);
    }

    #[test]
    fn grads_match_finite_differences() {
        let p = array![[0.2, 0.8], [0.6, 0.4]];
        let y = array![[0.0, 1.0], [1.0, 0.0]];
        let h = 1e-6;
        for (f, g) in [
            (cross_entropy as fn(&Array2<f64>, &Array2<f64>) -> f64, cross_entropy_grad(&p, &y)),
            (binary_cross_entropy, binary_cross_entropy_grad(&p, &y)),
        ] {
            for i in 0..2 {
                for j in 0..2 {
                    let mut up = p.clone();
                    up[[i, j]] += h;
                    let mut dn = p.clone();
                    dn[[i, j]] -= h;
                    let fd = (f(&up, &y) - f(&dn, &y)) / (2.0 * h);
                    assert!((fd - g[[i, j]]).abs() < 1e-7, "{fd} vs {}", g[[i, j]]);
                }
            }
        }
    }
}
