//! Dense feed-forward network engine in f64: seeded init, forward pass with
//! inverted dropout and batch-norm, exact backprop, SGD/Adam and a
//! finite-difference gradient oracle.
//!
//! A layer computes `z = x·Wᵀ + b`, then optional batch-norm `u = γ·x̂ + β`,
//! then the activation `a = act(u)`, then dropout. Its output is the next
//! layer's input.

mod activation;
mod gradcheck;
mod loss;
mod optim;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use activation::{relu, sigmoid, sigmoid_scalar, softmax, Activation};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use loss::{
    binary_cross_entropy, binary_cross_entropy_grad, cross_entropy, cross_entropy_grad,
    sigmoid_bce_grad, softmax_cross_entropy_grad, PROB_CLIP,
};
pub use optim::{adam_step, sgd_step, OptimizerKind, OptimizerState};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("input dimension must be positive")]
    ZeroInput,
    #[error("layer width must be positive")]
    ZeroWidth,
    #[error("dropout rate must be in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("softmax is only allowed on the output layer (layer {0})")]
    SoftmaxPlacement(usize),
    #[error("input contains NaN or infinite values")]
    NonFiniteInput,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward needs a train-mode trace")]
    ModeMismatch,
    #[error("optimizer kind mismatch: state is {state:?}, call is {call:?}")]
    OptimizerMismatch {
        state: OptimizerKind,
        call: OptimizerKind,
    },
    #[error("layer index {index} out of range for {len} layers")]
    IndexOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub batch_norm: bool,
}

impl LayerSpec {
    pub fn new(width: usize, activation: Activation) -> Self {
        Self {
            width,
            activation,
            dropout_rate: 0.0,
            batch_norm: false,
        }
    }

    pub fn dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub batch_norm: Option<BatchNorm>,
    pub frozen: bool,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        let bn = self.batch_norm.as_ref().map_or(0, |b| 2 * b.gamma.len());
        self.weights.len() + self.bias.len() + bn
    }

    /// Learnable parameters as flat slices: W, b, then γ, β when present.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ];
        if let Some(bn) = self.batch_norm.as_mut() {
            out.push(bn.gamma.as_slice_mut().expect("standard layout"));
            out.push(bn.beta.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        let bn_ok = self.batch_norm.as_ref().is_none_or(|b| {
            b.gamma.iter().chain(&b.beta).chain(&b.running_mean).chain(&b.running_var).all(|v| v.is_finite())
        });
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite()) && bn_ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        let bn = layer.batch_norm.as_ref();
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.len()),
            gamma: bn.map(|b| Array1::zeros(b.gamma.len())),
            beta: bn.map(|b| Array1::zeros(b.beta.len())),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.weights.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ];
        if let (Some(g), Some(b)) = (&self.gamma, &self.beta) {
            out.push(g.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ];
        if let (Some(g), Some(b)) = (self.gamma.as_mut(), self.beta.as_mut()) {
            out.push(g.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == 0.0))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    /// `boundary[i]` is ∂L/∂δ_i: index 0 is the network input, index `i` the
    /// output of layer `i - 1`.
    pub boundary: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Seeded dropout; batch-norm normalizes with and updates batch statistics.
    Train { seed: u64 },
    /// Seeded dropout; batch-norm frozen to its running statistics.
    FineTune { seed: u64 },
}

impl Mode {
    fn dropout_seed(self) -> Option<u64> {
        match self {
            Mode::Eval => None,
            Mode::Train { seed } | Mode::FineTune { seed } => Some(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnTrace {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub batch_stats: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub input: Array2<f64>,
    /// `x·Wᵀ + b`.
    pub linear: Array2<f64>,
    pub bn: Option<BnTrace>,
    /// Activation input (equals `linear` without batch-norm).
    pub pre_activation: Array2<f64>,
    pub activated: Array2<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-rate)).
    pub mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub layers: Vec<LayerTrace>,
    /// δ_0..δ_L: the input followed by each layer's output after dropout.
    pub deltas: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.deltas.last().expect("trace has the input delta")
    }

    pub fn delta(&self, i: usize) -> &Array2<f64> {
        &self.deltas[i]
    }
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_network(
    specs: &[LayerSpec],
    input_dim: usize,
    seed: u64,
) -> Result<Vec<DenseLayer>, NnError> {
    if input_dim == 0 {
        return Err(NnError::ZeroInput);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fan_in = input_dim;
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        if spec.width == 0 {
            return Err(NnError::ZeroWidth);
        }
        if !(0.0..1.0).contains(&spec.dropout_rate) {
            return Err(NnError::BadDropout(spec.dropout_rate));
        }
        if spec.activation == Activation::Softmax && i + 1 != specs.len() {
            return Err(NnError::SoftmaxPlacement(i));
        }
        let bound = (6.0 / (fan_in + spec.width) as f64).sqrt();
        let weights =
            Array2::from_shape_simple_fn((spec.width, fan_in), || rng.random_range(-bound..=bound));
        layers.push(DenseLayer {
            weights,
            bias: Array1::zeros(spec.width),
            activation: spec.activation,
            dropout_rate: spec.dropout_rate,
            batch_norm: spec.batch_norm.then(|| BatchNorm::new(spec.width)),
            frozen: false,
        });
        fan_in = spec.width;
    }
    Ok(layers)
}

/// Checks that consecutive layers chain and every parameter is finite.
pub fn validate_layers(layers: &[DenseLayer], input_dim: usize) -> Result<(), NnError> {
    let mut dim = input_dim;
    for (i, l) in layers.iter().enumerate() {
        if l.input_dim() != dim || l.bias.len() != l.output_dim() {
            return Err(NnError::Shape(format!(
                "layer {i} expects input {} (bias {}), previous width is {dim}",
                l.input_dim(),
                l.bias.len()
            )));
        }
        if let Some(bn) = &l.batch_norm {
            if bn.gamma.len() != l.output_dim() || bn.running_var.len() != l.output_dim() {
                return Err(NnError::Shape(format!("layer {i} batch-norm width")));
            }
        }
        if !l.is_finite() {
            return Err(NnError::Shape(format!("layer {i} has non-finite parameters")));
        }
        dim = l.output_dim();
    }
    Ok(())
}

pub fn set_frozen(layers: &mut [DenseLayer], indices: &[usize], frozen: bool) -> Result<(), NnError> {
    let len = layers.len();
    if let Some(&index) = indices.iter().find(|&&i| i >= len) {
        return Err(NnError::IndexOutOfRange { index, len });
    }
    for &i in indices {
        layers[i].frozen = frozen;
    }
    Ok(())
}

fn check_input(layers: &[DenseLayer], x: &Array2<f64>) -> Result<(), NnError> {
    if let Some(first) = layers.first() {
        if x.ncols() != first.input_dim() {
            return Err(NnError::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                first.input_dim()
            )));
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFiniteInput);
    }
    Ok(())
}

fn linear(layer: &DenseLayer, x: &Array2<f64>) -> Array2<f64> {
    x.dot(&layer.weights.t()) + &layer.bias
}

fn normalize(z: &Array2<f64>, mean: &Array1<f64>, inv_std: &Array1<f64>) -> Array2<f64> {
    (z - mean) * inv_std
}

/// Forward pass. Train mode updates batch-norm running statistics of
/// non-frozen layers.
pub fn forward(layers: &mut [DenseLayer], x: &Array2<f64>, mode: Mode) -> Result<ForwardTrace, NnError> {
    check_input(layers, x)?;
    let mut traces = Vec::with_capacity(layers.len());
    let mut deltas = Vec::with_capacity(layers.len() + 1);
    deltas.push(x.clone());
    for (li, layer) in layers.iter_mut().enumerate() {
        let input = deltas.last().expect("input delta").clone();
        let lin = linear(layer, &input);
        let (pre, bn_trace) = match layer.batch_norm.as_mut() {
            None => (lin.clone(), None),
            Some(bn) => {
                let use_batch = matches!(mode, Mode::Train { .. });
                let (mean, var) = if use_batch {
                    let n = lin.nrows() as f64;
                    let mean = lin.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = lin.var_axis(Axis(0), 0.0);
                    if !layer.frozen {
                        let unbiased = if n > 1.0 { &var * (n / (n - 1.0)) } else { var.clone() };
                        bn.running_mean = &bn.running_mean * bn.momentum + &mean * (1.0 - bn.momentum);
                        bn.running_var = &bn.running_var * bn.momentum + &unbiased * (1.0 - bn.momentum);
                    }
                    (mean, var)
                } else {
                    (bn.running_mean.clone(), bn.running_var.clone())
                };
                let inv_std = var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
                let normalized = normalize(&lin, &mean, &inv_std);
                let u = &normalized * &bn.gamma + &bn.beta;
                (
                    u,
                    Some(BnTrace {
                        normalized,
                        inv_std,
                        batch_stats: use_batch,
                    }),
                )
            }
        };
        let activated = layer.activation.apply(&pre);
        let (out, mask) = match mode.dropout_seed() {
            Some(seed) if layer.dropout_rate > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(li as u64);
                let keep = 1.0 - layer.dropout_rate;
                let mask = Array2::from_shape_simple_fn(activated.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                (&activated * &mask, Some(mask))
            }
            _ => (activated.clone(), None),
        };
        traces.push(LayerTrace {
            input,
            linear: lin,
            bn: bn_trace,
            pre_activation: pre,
            activated,
            mask,
        });
        deltas.push(out);
    }
    Ok(ForwardTrace {
        mode,
        layers: traces,
        deltas,
    })
}

/// Eval-mode forward without keeping a trace.
pub fn predict(layers: &[DenseLayer], x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
    check_input(layers, x)?;
    let mut h = x.clone();
    for layer in layers {
        let lin = linear(layer, &h);
        let pre = match &layer.batch_norm {
            None => lin,
            Some(bn) => {
                let inv_std = bn.running_var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
                normalize(&lin, &bn.running_mean, &inv_std) * &bn.gamma + &bn.beta
            }
        };
        h = layer.activation.apply(&pre);
    }
    Ok(h)
}

/// Where the upstream gradient enters a layer.
#[derive(Debug, Clone)]
pub enum GradSeed {
    /// ∂L/∂(layer output after dropout).
    Output(Array2<f64>),
    /// ∂L/∂(activation input), e.g. a fused softmax/sigmoid loss gradient.
    PreActivation(Array2<f64>),
}

/// Backprop through one layer. Returns its parameter gradients (zero when
/// frozen) and ∂L/∂input.
pub fn backward_layer(layer: &DenseLayer, trace: &LayerTrace, seed: GradSeed) -> (LayerGrad, Array2<f64>) {
    let g_pre = match seed {
        GradSeed::PreActivation(g) => g,
        GradSeed::Output(g) => {
            let g_act = match &trace.mask {
                Some(mask) => &g * mask,
                None => g,
            };
            layer
                .activation
                .backward(&trace.pre_activation, &trace.activated, &g_act)
        }
    };
    let mut grad = LayerGrad::zeros_like(layer);
    let g_lin = match (&layer.batch_norm, &trace.bn) {
        (Some(bn), Some(bt)) => {
            let g_gamma = (&g_pre * &bt.normalized).sum_axis(Axis(0));
            let g_beta = g_pre.sum_axis(Axis(0));
            let g_norm = &g_pre * &bn.gamma;
            let g_lin = if bt.batch_stats {
                let n = g_pre.nrows() as f64;
                let sum_g = g_norm.sum_axis(Axis(0));
                let sum_gx = (&g_norm * &bt.normalized).sum_axis(Axis(0));
                let mut out = &g_norm * n - &sum_g;
                Zip::from(&mut out)
                    .and(&bt.normalized)
                    .and_broadcast(&sum_gx)
                    .for_each(|o, &xh, &s| *o -= xh * s);
                out * &(&bt.inv_std / n)
            } else {
                g_norm * &bt.inv_std
            };
            if !layer.frozen {
                grad.gamma = Some(g_gamma);
                grad.beta = Some(g_beta);
            }
            g_lin
        }
        _ => g_pre,
    };
    if !layer.frozen {
        grad.weights = g_lin.t().dot(&trace.input);
        grad.bias = g_lin.sum_axis(Axis(0));
    }
    let g_in = g_lin.dot(&layer.weights);
    (grad, g_in)
}

/// Backprop from a gradient at the network output.
pub fn backward(layers: &[DenseLayer], trace: &ForwardTrace, grad_output: Array2<f64>) -> Result<Gradients, NnError> {
    backward_seeded(layers, trace, GradSeed::Output(grad_output))
}

pub fn backward_seeded(layers: &[DenseLayer], trace: &ForwardTrace, seed: GradSeed) -> Result<Gradients, NnError> {
    backward_through(layers, trace, layers.len(), seed, Vec::new())
}

/// Backprop through `layers[..upto]`, with `seed` entering layer `upto - 1`.
/// `tail` holds already-computed gradients of layers `upto..` (in order)
/// and is appended to the result.
pub fn backward_through(
    layers: &[DenseLayer],
    trace: &ForwardTrace,
    upto: usize,
    seed: GradSeed,
    tail: Vec<(LayerGrad, Array2<f64>)>,
) -> Result<Gradients, NnError> {
    if matches!(trace.mode, Mode::Eval) {
        return Err(NnError::ModeMismatch);
    }
    if trace.layers.len() != layers.len() || upto == 0 || upto > layers.len() {
        return Err(NnError::Shape("trace does not match layers".into()));
    }
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(layers.len());
    let mut boundary: Vec<Array2<f64>> = Vec::with_capacity(layers.len() + 1);
    let mut seed = seed;
    for i in (0..upto).rev() {
        let (g, g_in) = backward_layer(&layers[i], &trace.layers[i], seed);
        grads.push(g);
        boundary.push(g_in.clone());
        seed = GradSeed::Output(g_in);
    }
    grads.reverse();
    boundary.reverse();
    for (g, b) in tail {
        grads.push(g);
        boundary.push(b);
    }
    Ok(Gradients {
        layers: grads,
        boundary,
    })
}

/// Derives an independent 64-bit seed from a base seed and a path of
/// indices (splitmix64 finalizer over each step).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut z = base;
    for &p in path {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(p.wrapping_mul(0xd1b5_4a32_d192_ed03));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// SHA-256 over every parameter and batch-norm buffer bit pattern.
pub fn parameter_hash(layers: &[DenseLayer]) -> String {
    let mut h = Sha256::new();
    for l in layers {
        let bn = l.batch_norm.iter().flat_map(|b| {
            b.gamma.iter().chain(&b.beta).chain(&b.running_mean).chain(&b.running_var)
        });
        for v in l.weights.iter().chain(&l.bias).chain(bn) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests;
