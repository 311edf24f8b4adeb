use super::*;
use crate::nn::{finite_diff_grad, max_relative_error, sigmoid_scalar, LayerGrad};
use crate::taxonomy::{fraud_taxonomy, Concept, Polarity};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_taxonomy() -> ConceptTaxonomy {
    ConceptTaxonomy::new(vec![
        Concept::new("suspicious_ip", "Suspicious IP", Polarity::Fraud, ""),
        Concept::new("other_fraud", "Other fraud", Polarity::OtherFraud, ""),
        Concept::new("other_legit", "Other legit", Polarity::OtherLegit, ""),
    ])
    .unwrap()
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, k: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let x = Array2::from_shape_simple_fn((n, dim), || rng.random_range(-2.0..2.0));
    let mut y = Array2::zeros((n, 2));
    for r in 0..n {
        y[[r, usize::from(rng.random_bool(0.5))]] = 1.0;
    }
    let s = Array2::from_shape_simple_fn((n, k), || f64::from(u8::from(rng.random_bool(0.4))));
    (x, y, s)
}

fn dataset(x: Array2<f64>, y: &Array2<f64>, s: Array2<f64>) -> EncodedDataset {
    EncodedDataset {
        ids: (0..x.nrows()).map(|i| i.to_string()).collect(),
        labels: y.column(1).iter().map(|v| *v == 1.0).collect(),
        x,
        concepts: s,
    }
}

#[test]
fn builds_reference_architecture() {
    let arch = ArchSpec::new(vec![128, 128, 64, 64, 32]);
    let net = JoelNetwork::build(&arch, 40, fraud_taxonomy(), 1).unwrap();
    assert_eq!(net.layers.len(), 7);
    assert_eq!(net.layers[net.semantic_index()].output_dim(), 14);
    assert_eq!(net.layers[net.decision_index()].input_dim(), 14);
    assert!(arch.within_reference_grid());
    assert!(!ArchSpec::new(vec![8]).within_reference_grid());
}

#[test]
fn smallest_taxonomy_is_valid() {
    let tax = ConceptTaxonomy::new(vec![
        Concept::new("other_fraud", "Other fraud", Polarity::OtherFraud, ""),
        Concept::new("other_legit", "Other legit", Polarity::OtherLegit, ""),
    ])
    .unwrap();
    let net = JoelNetwork::build(&ArchSpec::new(vec![4]), 3, tax, 0).unwrap();
    assert_eq!(net.concepts(), 2);
}

#[test]
fn tampered_hierarchy_is_detected() {
    let mut net = JoelNetwork::build(&ArchSpec::new(vec![6]), 4, small_taxonomy(), 0).unwrap();
    let d = net.decision_index();
    net.layers[d].weights = Array2::zeros((2, 4));
    assert!(matches!(net.validate(), Err(ModelError::Hierarchy(_))));
}

#[test]
fn thresholds_at_the_extremes() {
    let mut net = JoelNetwork::build(&ArchSpec::new(vec![6]), 4, small_taxonomy(), 2).unwrap();
    // saturate one concept so its raw sigmoid rounds to exactly 1
    let s = net.semantic_index();
    net.layers[s].bias[0] = 60.0;
    let x = ndarray::arr1(&[0.1, -0.3, 2.0, 1.0]);
    net.concept_thresholds = vec![1.0; 3];
    assert!(net.predict(x.view()).unwrap().concepts_fired.is_empty());
    net.concept_thresholds = vec![0.0; 3];
    assert_eq!(net.predict(x.view()).unwrap().concepts_fired.len(), 3);
}

#[test]
fn predict_matches_composed_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = JoelNetwork::build(&ArchSpec::new(vec![5, 4]), 3, small_taxonomy(), 3).unwrap();
    let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut h = x.clone();
    for (i, l) in net.layers.iter().enumerate() {
        let z: Vec<f64> = (0..l.output_dim())
            .map(|o| l.bias[o] + (0..h.len()).map(|j| l.weights[[o, j]] * h[j]).sum::<f64>())
            .collect();
        h = if i < net.semantic_index() {
            z.iter().map(|v| v.max(0.0)).collect()
        } else if i == net.semantic_index() {
            z.iter().map(|v| sigmoid_scalar(*v)).collect()
        } else {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            e.iter().map(|v| v / sum).collect()
        };
        if i == net.semantic_index() {
            let p = net.predict(ndarray::arr1(&x).view()).unwrap();
            for (a, b) in p.concept_scores.iter().zip(&h) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
    let p = net.predict(ndarray::arr1(&x).view()).unwrap();
    assert!((p.fraud_score - h[1]).abs() < 1e-12);
}

#[test]
fn zero_semantic_input_gives_softmax_of_bias() {
    let mut net = JoelNetwork::build(&ArchSpec::new(vec![3]), 2, small_taxonomy(), 0).unwrap();
    let d = net.decision_index();
    net.layers[d].bias = ndarray::arr1(&[0.3, -0.2]);
    let out = net.decision_from_semantic(&Array2::zeros((1, 3))).unwrap();
    let e = [0.3f64.exp(), (-0.2f64).exp()];
    assert!((out[[0, 1]] - e[1] / (e[0] + e[1])).abs() < 1e-15);
}

#[test]
fn joint_loss_composition() {
    let y = ndarray::array![[0.0, 1.0]];
    let s = ndarray::array![[1.0, 0.0, 1.0]];
    let perfect = joint_loss(&y, &s, &y, &s, 1.0);
    assert!(perfect.total < 1e-10);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = Array2::from_shape_simple_fn((4, 2), || rng.random_range(0.05..0.95));
    let q = Array2::from_shape_simple_fn((4, 3), || rng.random_range(0.05..0.95));
    let (_, y, s) = random_batch(&mut rng, 4, 1, 3);
    let l0 = joint_loss(&p, &q, &y, &s, 0.0);
    assert_eq!(l0.total, l0.decision);
    let l2 = joint_loss(&p, &q, &y, &s, 2.0);
    // independent evaluation of both losses
    let mut ld = 0.0;
    let mut ls = 0.0;
    for r in 0..4 {
        for c in 0..2 {
            ld -= y[[r, c]] * p[[r, c]].ln();
        }
        for c in 0..3 {
            ls -= s[[r, c]] * q[[r, c]].ln() + (1.0 - s[[r, c]]) * (1.0 - q[[r, c]]).ln();
        }
    }
    let (ld, ls) = (ld / 4.0, ls / 12.0);
    assert!((l2.total - (ld + 2.0 * ls)).abs() < 1e-12);
}

#[test]
fn lambda_zero_matches_plain_classifier() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net = JoelNetwork::build(&ArchSpec::new(vec![5, 4]).with_dropout(vec![0.2, 0.1]), 3, small_taxonomy(), 6).unwrap();
    let (x, y, s) = random_batch(&mut rng, 7, 3, 3);
    let trace = net.forward(&x, Mode::Train { seed: 2 }).unwrap();
    let joint = net.joint_backward_weighted(&trace, &y, &s, 1.0, 0.0).unwrap();
    let g = softmax_cross_entropy_grad(trace.output(), &y);
    let plain = nn::backward_seeded(&net.layers, &trace, GradSeed::PreActivation(g)).unwrap();
    for (a, b) in joint.grads.layers.iter().zip(&plain.layers) {
        let diff = a.flatten().iter().zip(b.flatten()).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        assert!(diff < 1e-15, "{diff}");
    }
}

#[test]
fn semantic_gradient_is_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = JoelNetwork::build(&ArchSpec::new(vec![6]), 4, small_taxonomy(), 1).unwrap();
    let (x, y, s) = random_batch(&mut rng, 10, 4, 3);
    let trace = net.forward(&x, Mode::Train { seed: 0 }).unwrap();
    for lambda in [0.5, 1.0, 2.0] {
        let total = net.joint_backward_weighted(&trace, &y, &s, 1.0, lambda).unwrap();
        let d_only = net.joint_backward_weighted(&trace, &y, &s, 1.0, 0.0).unwrap();
        let s_only = net.joint_backward_weighted(&trace, &y, &s, 0.0, 1.0).unwrap();
        let sum = &d_only.at_semantic + &(&s_only.at_semantic * lambda);
        let diff = (&total.at_semantic - &sum).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff <= 1e-10);
        assert_eq!(total.grads.boundary[net.semantic_index() + 1], total.at_semantic);
    }
}

#[test]
fn joint_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let net = JoelNetwork::build(&ArchSpec::new(vec![8]).with_batch_norm(true), 5, small_taxonomy(), 3).unwrap().with_lambda(1.5);
    let (x, y, s) = random_batch(&mut rng, 6, 5, 3);
    let mut work = net.clone();
    let trace = work.forward(&x, Mode::Train { seed: 9 }).unwrap();
    let analytic = net.joint_backward(&trace, &y, &s).unwrap();
    let loss = |layers: &[DenseLayer]| {
        let mut probe = net.clone();
        probe.layers = layers.to_vec();
        let t = probe.forward(&x, Mode::Train { seed: 9 }).unwrap();
        probe.trace_loss(&t, &y, &s).total
    };
    let numeric: Vec<LayerGrad> = finite_diff_grad(&net.layers, loss, 1e-5);
    let err = max_relative_error(&analytic.grads.layers, &numeric, 1e-7);
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn calibration_respects_fpr_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = JoelNetwork::build(&ArchSpec::new(vec![6]), 4, small_taxonomy(), 2).unwrap();
    let (x, y, mut s) = random_batch(&mut rng, 300, 4, 3);
    s.column_mut(2).fill(0.0);
    let data = dataset(x, &y, s);
    let report = net.calibrate_thresholds(&data, 0.03, 0.20).unwrap();
    assert_eq!(report.flagged, vec!["other_legit"]);
    assert_eq!(net.concept_thresholds[2], UNCALIBRATED_THRESHOLD);
    let scores = net.predict_batch(&data.x).unwrap();
    let neg = data.labels.iter().filter(|l| !**l).count() as f64;
    let fp = scores
        .fraud
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| !**l && **p >= net.decision_threshold)
        .count() as f64;
    assert!(fp / neg <= 0.03);
    for k in 0..2 {
        let col = data.concepts.column(k);
        let neg = col.iter().filter(|v| **v == 0.0).count() as f64;
        let fp = scores
            .concepts
            .column(k)
            .iter()
            .zip(col)
            .filter(|(p, v)| **v == 0.0 && **p >= net.concept_thresholds[k])
            .count() as f64;
        assert!(fp / neg <= 0.20);
    }
    let empty = data.select(&[]);
    assert!(matches!(net.calibrate_thresholds(&empty, 0.03, 0.2), Err(ModelError::EmptyReference)));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = JoelNetwork::build(&ArchSpec::new(vec![7, 5]).with_batch_norm(true).with_dropout(vec![0.3, 0.1]), 4, small_taxonomy(), 11).unwrap();
    let (x, _, _) = random_batch(&mut rng, 20, 4, 3);
    net.forward(&x, Mode::Train { seed: 1 }).unwrap();
    net.concept_thresholds = vec![0.1 + 1e-17, 1.0 / 3.0, 0.7];
    net.version = 4;
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, net);
    let a = net.predict_batch(&x).unwrap();
    let b = back.predict_batch(&x).unwrap();
    assert!(a.fraud.iter().zip(&b.fraud).all(|(u, v)| u.to_bits() == v.to_bits()));
    assert_eq!(a.concepts, b.concepts);
    assert!(load_checkpoint_with_taxonomy(&path, &small_taxonomy()).is_ok());
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let net = JoelNetwork::build(&ArchSpec::new(vec![3]), 2, small_taxonomy(), 0).unwrap();
    save_checkpoint(&net, &path).unwrap();
    assert!(matches!(
        load_checkpoint_with_taxonomy(&path, &fraud_taxonomy()),
        Err(ModelError::TaxonomyMismatch { .. })
    ));

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("JOEL-CKPT", "JOEL-CKPX", 1)).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Format(_))));
    std::fs::write(&path, text.replacen("\"format_version\":1", "\"format_version\":9", 1)).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Version { found: 9, .. })));
    std::fs::write(&path, b"\x00\x01garbage").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Format(_))));
}

#[test]
fn random_networks_pass_the_gradient_check() {
    for seed in 0..200 {
        let r = gradient_check(seed).unwrap();
        assert!(r.params <= 2000);
        assert!(r.max_error() <= 1e-4, "{r:?}");
    }
}
