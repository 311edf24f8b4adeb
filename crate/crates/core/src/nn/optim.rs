use serde::{Deserialize, Serialize};

use super::{DenseLayer, Gradients, LayerGrad, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<LayerGrad>,
    v: Vec<LayerGrad>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, eta: f64) -> Self {
        Self {
            kind,
            eta,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn sgd(eta: f64) -> Self {
        Self::new(OptimizerKind::Sgd, eta)
    }

    pub fn adam(eta: f64) -> Self {
        Self::new(OptimizerKind::Adam, eta)
    }

    /// Applies the step matching `self.kind`.
    pub fn step(&mut self, layers: &mut [DenseLayer], grads: &Gradients) -> Result<(), NnError> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(layers, grads, self),
            OptimizerKind::Adam => adam_step(layers, grads, self),
        }
    }
}

fn check(
    layers: &[DenseLayer],
    grads: &Gradients,
    state: &OptimizerState,
    call: OptimizerKind,
) -> Result<(), NnError> {
    if state.kind != call {
        return Err(NnError::OptimizerMismatch {
            state: state.kind,
            call,
        });
    }
    if layers.len() != grads.layers.len() {
        return Err(NnError::Shape(format!(
            "{} layers but {} gradient blocks",
            layers.len(),
            grads.layers.len()
        )));
    }
    for (i, (l, g)) in layers.iter().zip(&grads.layers).enumerate() {
        let same = l.weights.dim() == g.weights.dim()
            && l.bias.len() == g.bias.len()
            && l.batch_norm.as_ref().map(|b| b.gamma.len()) == g.gamma.as_ref().map(|g| g.len())
            && g.gamma.as_ref().map(|g| g.len()) == g.beta.as_ref().map(|b| b.len());
        if !same {
            return Err(NnError::Shape(format!("gradient block {i} does not match its layer")));
        }
    }
    Ok(())
}

/// θ ← θ − η·∂L/∂θ for every non-frozen layer.
pub fn sgd_step(layers: &mut [DenseLayer], grads: &Gradients, state: &mut OptimizerState) -> Result<(), NnError> {
    check(layers, grads, state, OptimizerKind::Sgd)?;
    let eta = state.eta;
    for (layer, g) in layers.iter_mut().zip(&grads.layers) {
        if layer.frozen {
            continue;
        }
        for (p, g) in layer.param_slices_mut().into_iter().zip(g.slices()) {
            for (p, g) in p.iter_mut().zip(g) {
                *p -= eta * g;
            }
        }
    }
    state.t += 1;
    Ok(())
}

/// Bias-corrected Adam. Moments are created on first use and left
/// untouched for frozen layers.
pub fn adam_step(layers: &mut [DenseLayer], grads: &Gradients, state: &mut OptimizerState) -> Result<(), NnError> {
    check(layers, grads, state, OptimizerKind::Adam)?;
    if state.m.len() != layers.len() {
        state.m = layers.iter().map(LayerGrad::zeros_like).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let (b1, b2, eps, eta) = (state.beta1, state.beta2, state.epsilon, state.eta);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((layer, g), m), v) in layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if layer.frozen {
            continue;
        }
        let blocks = layer
            .param_slices_mut()
            .into_iter()
            .zip(g.slices())
            .zip(m.slices_mut())
            .zip(v.slices_mut());
        for (((p, g), m), v) in blocks {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= eta * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
