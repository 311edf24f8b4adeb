use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
    Identity,
}

pub fn relu(v: ArrayView1<f64>) -> Array1<f64> {
    v.mapv(|x| x.max(0.0))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: ArrayView1<f64>) -> Array1<f64> {
    v.mapv(sigmoid_scalar)
}

/// Softmax with max-subtraction.
pub fn softmax(v: ArrayView1<f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = v.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e / sum
}

impl Activation {
    /// Applies the activation row-wise to a batch.
    pub fn apply(self, u: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => u.mapv(|x| x.max(0.0)),
            Activation::Sigmoid => u.mapv(sigmoid_scalar),
            Activation::Identity => u.clone(),
            Activation::Softmax => {
                let mut out = u.clone();
                for mut row in out.axis_iter_mut(Axis(0)) {
                    let s = softmax(row.view());
                    row.assign(&s);
                }
                out
            }
        }
    }

    /// Vector-Jacobian product: maps ∂L/∂a to ∂L/∂u given the activation
    /// input `u` and output `a`.
    pub fn backward(self, u: &Array2<f64>, a: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => grad.clone(),
            Activation::Relu => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(u).for_each(|g, &u| {
                    if u <= 0.0 {
                        *g = 0.0;
                    }
                });
                g
            }
            Activation::Sigmoid => {
                let mut g = grad.clone();
                Zip::from(&mut g).and(a).for_each(|g, &a| *g *= a * (1.0 - a));
                g
            }
            Activation::Softmax => {
                let mut g = grad.clone();
                for (mut g_row, a_row) in g.axis_iter_mut(Axis(0)).zip(a.axis_iter(Axis(0))) {
                    let dot = g_row.dot(&a_row);
                    Zip::from(&mut g_row)
                        .and(&a_row)
                        .for_each(|g, &a| *g = a * (*g - dot));
                }
                g
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_known_values() {
        let s = softmax(array![0.0, 0.0, 0.0].view());
        for v in s.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(array![1.0, 2.0].view());
        assert!((s[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((s[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
        let big = softmax(array![1000.0, 1000.0].view());
        assert_eq!(big.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn sigmoid_and_relu() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(-800.0).is_finite());
        assert_eq!(relu(array![-1.0, 0.0, 2.5].view()).to_vec(), vec![0.0, 0.0, 2.5]);
        let s = sigmoid(array![-3.0, 3.0].view());
        assert!((s[0] + s[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let u = array![[3.0, -1.0, 0.5], [100.0, 99.0, -50.0]];
        let a = Activation::Softmax.apply(&u);
        for row in a.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
