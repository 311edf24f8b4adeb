use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchSpec, JoelNetwork, ModelError};
use crate::nn::{finite_diff_grad, max_relative_error, DenseLayer, Mode};
use crate::taxonomy::{Concept, ConceptTaxonomy, Polarity};

/// Outcome of one randomized finite-difference check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub concepts: usize,
    pub batch_norm: bool,
    pub lambda: f64,
    pub params: usize,
    /// Input batches rejected for lying too close to a ReLU kink.
    pub redraws: usize,
    /// Worst entry for `L_D + λ·L_S`.
    pub joint_error: f64,
    /// Worst entry for `L_S` alone.
    pub semantic_error: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.joint_error.max(self.semantic_error)
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 1000;
/// Central differences at h = 1e-5 carry roundoff near 1e-11, which is all
/// they report for exactly-zero gradients such as biases feeding batch norm.
const GRADCHECK_FLOOR: f64 = 1e-6;

fn taxonomy(planted: usize) -> ConceptTaxonomy {
    let mut concepts: Vec<Concept> = (0..planted)
        .map(|i| {
            let polarity = if i % 2 == 0 { Polarity::Fraud } else { Polarity::Legit };
            Concept::new(&format!("c{i}"), &format!("C{i}"), polarity, "")
        })
        .collect();
    concepts.push(Concept::new("other_fraud", "Other fraud", Polarity::OtherFraud, ""));
    concepts.push(Concept::new("other_legit", "Other legit", Polarity::OtherLegit, ""));
    ConceptTaxonomy::new(concepts).expect("generated taxonomy is valid")
}

/// Builds a small random network from `seed` (one to three trunk layers,
/// optional batch norm, random biases, λ drawn from {0, 1, 2}) and compares analytic
/// gradients with central differences, once for the joint loss and once for
/// the semantic loss alone.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.random_range(2..=6);
    let depth = rng.random_range(1..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(3..=10)).collect();
    let planted = rng.random_range(1..=3);
    let batch_norm = rng.random_bool(0.5);
    let lambda = [0.0, 1.0, 2.0][rng.random_range(0..3)];
    let n = rng.random_range(4..=8);

    let arch = ArchSpec::new(hidden.clone()).with_batch_norm(batch_norm);
    let mut net = JoelNetwork::build(&arch, input_dim, taxonomy(planted), rng.random())?.with_lambda(lambda);
    // zero biases put a fully dead layer's successors exactly on the ReLU kink
    for layer in &mut net.layers {
        layer.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    }
    let k = net.concepts();
    // finite differences are only meaningful away from ReLU kinks
    let mut redraws = 0;
    let (x, y, s, mode, trace) = loop {
        let x = Array2::from_shape_simple_fn((n, input_dim), || rng.random_range(-2.0..2.0));
        let mut y = Array2::zeros((n, 2));
        for r in 0..n {
            y[[r, usize::from(rng.random_bool(0.5))]] = 1.0;
        }
        let s = Array2::from_shape_simple_fn((n, k), || f64::from(u8::from(rng.random_bool(0.4))));
        let mode = Mode::Train { seed: rng.random() };
        let mut work = net.clone();
        let trace = work.forward(&x, mode)?;
        let margin = trace.layers[..net.trunk_len()]
            .iter()
            .flat_map(|l| l.pre_activation.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if margin >= KINK_MARGIN || redraws == MAX_REDRAWS {
            break (x, y, s, mode, trace);
        }
        redraws += 1;
    };
    let joint = net.joint_backward(&trace, &y, &s)?;
    let semantic = net.joint_backward_weighted(&trace, &y, &s, 0.0, 1.0)?;

    let probe_loss = |layers: &[DenseLayer], semantic_only: bool| {
        let mut probe = net.clone();
        probe.layers = layers.to_vec();
        let t = probe.forward(&x, mode).expect("shapes fixed by construction");
        let l = probe.trace_loss(&t, &y, &s);
        if semantic_only {
            l.semantic
        } else {
            l.total
        }
    };
    let numeric_joint = finite_diff_grad(&net.layers, |l| probe_loss(l, false), GRADCHECK_STEP);
    let numeric_semantic = finite_diff_grad(&net.layers, |l| probe_loss(l, true), GRADCHECK_STEP);

    Ok(GradCheckReport {
        seed,
        input_dim,
        hidden,
        concepts: k,
        batch_norm,
        lambda,
        params: net.num_params(),
        redraws,
        joint_error: max_relative_error(&joint.grads.layers, &numeric_joint, GRADCHECK_FLOOR),
        semantic_error: max_relative_error(&semantic.grads.layers, &numeric_semantic, GRADCHECK_FLOOR),
    })
}
