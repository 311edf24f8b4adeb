use super::{DenseLayer, LayerGrad};

/// Central differences `(L(θ+h) − L(θ−h)) / 2h` for every learnable scalar,
/// laid out like [`LayerGrad`]. Intended for small networks.
pub fn finite_diff_grad<F>(layers: &[DenseLayer], mut loss: F, h: f64) -> Vec<LayerGrad>
where
    F: FnMut(&[DenseLayer]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut work = layers.to_vec();
    let mut out: Vec<LayerGrad> = layers.iter().map(LayerGrad::zeros_like).collect();
    for li in 0..work.len() {
        let blocks = work[li].param_slices_mut().len();
        for bi in 0..blocks {
            let len = work[li].param_slices_mut()[bi].len();
            for k in 0..len {
                let orig = work[li].param_slices_mut()[bi][k];
                work[li].param_slices_mut()[bi][k] = orig + h;
                let up = loss(&work);
                work[li].param_slices_mut()[bi][k] = orig - h;
                let down = loss(&work);
                work[li].param_slices_mut()[bi][k] = orig;
                out[li].slices_mut()[bi][k] = (up - down) / (2.0 * h);
            }
        }
    }
    out
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// blowing up.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

pub fn max_relative_error(analytic: &[LayerGrad], numeric: &[LayerGrad], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.flatten().into_iter().zip(n.flatten()))
        .map(|(a, n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}
