use super::*;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Plain triple-loop dense evaluation, independent of ndarray's `dot`.
fn oracle_forward(layers: &[DenseLayer], x: &Array2<f64>) -> Array2<f64> {
    let mut h = x.clone();
    for l in layers {
        let mut z = Array2::zeros((h.nrows(), l.output_dim()));
        for r in 0..h.nrows() {
            for o in 0..l.output_dim() {
                let mut acc = l.bias[o];
                for i in 0..l.input_dim() {
                    acc += l.weights[[o, i]] * h[[r, i]];
                }
                z[[r, o]] = acc;
            }
        }
        h = match l.activation {
            Activation::Relu => z.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Sigmoid => z.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Identity => z,
            Activation::Softmax => {
                let mut out = z.clone();
                for r in 0..z.nrows() {
                    let m = z.row(r).iter().cloned().fold(f64::MIN, f64::max);
                    let s: f64 = z.row(r).iter().map(|v| (v - m).exp()).sum();
                    for c in 0..z.ncols() {
                        out[[r, c]] = (z[[r, c]] - m).exp() / s;
                    }
                }
                out
            }
        };
    }
    h
}

#[test]
fn init_is_deterministic_and_bounded() {
    let specs = vec![LayerSpec::new(64, Activation::Relu)];
    let a = init_network(&specs, 128, 7).unwrap();
    let b = init_network(&specs, 128, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(parameter_hash(&a), parameter_hash(&b));
    let bound = (6.0f64 / 192.0).sqrt();
    assert!((bound - 0.1768).abs() < 1e-4);
    assert!(a[0].weights.iter().all(|w| w.abs() <= bound));
    assert!(a[0].bias.iter().all(|b| *b == 0.0));
    assert_ne!(a, init_network(&specs, 128, 8).unwrap());
}

#[test]
fn init_rejects_bad_specs() {
    let relu = LayerSpec::new(4, Activation::Relu);
    assert_eq!(init_network(std::slice::from_ref(&relu), 0, 0), Err(NnError::ZeroInput));
    assert_eq!(
        init_network(&[LayerSpec::new(0, Activation::Relu)], 3, 0),
        Err(NnError::ZeroWidth)
    );
    assert_eq!(
        init_network(&[LayerSpec::new(2, Activation::Softmax), relu.clone()], 3, 0),
        Err(NnError::SoftmaxPlacement(0))
    );
    assert_eq!(
        init_network(&[relu.dropout(1.0)], 3, 0),
        Err(NnError::BadDropout(1.0))
    );
}

#[test]
fn identity_network_passes_input_through() {
    let mut layers = init_network(&[LayerSpec::new(3, Activation::Identity)], 3, 0).unwrap();
    layers[0].weights = Array2::eye(3);
    let x = array![[1.0, -2.0, 3.5], [0.0, 0.25, -7.0]];
    let trace = forward(&mut layers, &x, Mode::Train { seed: 1 }).unwrap();
    assert_eq!(trace.output(), &x);
    assert_eq!(trace.delta(0), &x);
}

#[test]
fn forward_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let specs = [
        LayerSpec::new(5, Activation::Relu),
        LayerSpec::new(4, Activation::Sigmoid),
        LayerSpec::new(3, Activation::Softmax),
    ];
    let mut layers = init_network(&specs, 6, 11).unwrap();
    for l in &mut layers {
        l.bias = Array1::from_shape_simple_fn(l.bias.len(), || rng.random_range(-0.5..0.5));
    }
    let x = random_matrix(&mut rng, 7, 6);
    let expect = oracle_forward(&layers, &x);
    let got = forward(&mut layers, &x, Mode::Eval).unwrap();
    let max = (got.output() - &expect).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max <= 1e-12, "max diff {max}");
    assert_eq!(predict(&layers, &x).unwrap(), *got.output());
}

#[test]
fn zero_dropout_train_equals_eval() {
    let specs = [
        LayerSpec::new(6, Activation::Relu).batch_norm(true),
        LayerSpec::new(2, Activation::Softmax),
    ];
    let mut layers = init_network(&specs, 4, 1).unwrap();
    let x = random_matrix(&mut ChaCha8Rng::seed_from_u64(9), 5, 4);
    // fixed bn stats: fine-tune mode uses running statistics like eval
    let a = forward(&mut layers, &x, Mode::FineTune { seed: 3 }).unwrap();
    let b = forward(&mut layers, &x, Mode::Eval).unwrap();
    assert_eq!(a.output(), b.output());
}

#[test]
fn inverted_dropout_scales_kept_units() {
    let mut layers =
        init_network(&[LayerSpec::new(200, Activation::Identity).dropout(0.25)], 3, 0).unwrap();
    let x = array![[1.0, 2.0, 3.0]];
    let train = forward(&mut layers, &x, Mode::Train { seed: 5 }).unwrap();
    let eval = predict(&layers, &x).unwrap();
    let mut dropped = 0;
    for (t, e) in train.output().iter().zip(eval.iter()) {
        if *t == 0.0 {
            dropped += 1;
        } else {
            assert!((t - e / 0.75).abs() < 1e-12);
        }
    }
    assert!(dropped > 20 && dropped < 80, "{dropped}");
    let again = forward(&mut layers, &x, Mode::Train { seed: 5 }).unwrap();
    assert_eq!(train.output(), again.output());
}

#[test]
fn nan_input_is_rejected() {
    let mut layers = init_network(&[LayerSpec::new(2, Activation::Relu)], 2, 0).unwrap();
    let x = array![[1.0, f64::NAN]];
    assert_eq!(forward(&mut layers, &x, Mode::Eval).unwrap_err(), NnError::NonFiniteInput);
}

#[test]
fn batch_norm_running_stats_update_only_in_train() {
    let mut layers =
        init_network(&[LayerSpec::new(3, Activation::Relu).batch_norm(true)], 2, 0).unwrap();
    let x = random_matrix(&mut ChaCha8Rng::seed_from_u64(1), 8, 2);
    forward(&mut layers, &x, Mode::Eval).unwrap();
    forward(&mut layers, &x, Mode::FineTune { seed: 0 }).unwrap();
    let bn = layers[0].batch_norm.clone().unwrap();
    assert!(bn.running_mean.iter().all(|v| *v == 0.0));
    forward(&mut layers, &x, Mode::Train { seed: 0 }).unwrap();
    let bn = layers[0].batch_norm.as_ref().unwrap();
    assert!(bn.running_mean.iter().any(|v| *v != 0.0));
}

fn mse_loss(layers: &[DenseLayer], x: &Array2<f64>, target: &Array2<f64>, seed: u64) -> f64 {
    let mut work = layers.to_vec();
    let out = forward(&mut work, x, Mode::Train { seed }).unwrap();
    0.5 * (out.output() - target).mapv(|v| v * v).sum() / x.nrows() as f64
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let specs = [
        LayerSpec::new(5, Activation::Relu).batch_norm(true).dropout(0.3),
        LayerSpec::new(4, Activation::Sigmoid),
        LayerSpec::new(3, Activation::Identity).batch_norm(true),
    ];
    let layers = init_network(&specs, 4, 2).unwrap();
    let x = random_matrix(&mut rng, 6, 4);
    let target = random_matrix(&mut rng, 6, 3);
    let mut work = layers.clone();
    let trace = forward(&mut work, &x, Mode::Train { seed: 4 }).unwrap();
    let g_out = (trace.output() - &target) / x.nrows() as f64;
    let grads = backward(&layers, &trace, g_out).unwrap();
    let numeric = finite_diff_grad(&layers, |l| mse_loss(l, &x, &target, 4), 1e-5);
    let err = max_relative_error(&grads.layers, &numeric, 1e-6);
    assert!(err <= 1e-4, "relative error {err}");

    // input-boundary gradient against differences on x
    let h = 1e-5;
    for (r, c) in [(0, 0), (3, 2), (5, 3)] {
        let mut up = x.clone();
        up[[r, c]] += h;
        let mut dn = x.clone();
        dn[[r, c]] -= h;
        let fd = (mse_loss(&layers, &up, &target, 4) - mse_loss(&layers, &dn, &target, 4)) / (2.0 * h);
        assert!(relative_error(fd, grads.boundary[0][[r, c]], 1e-6) < 1e-4);
    }
}

#[test]
fn zero_output_gradient_gives_zero_parameter_gradients() {
    let specs = [LayerSpec::new(3, Activation::Relu), LayerSpec::new(2, Activation::Sigmoid)];
    let mut layers = init_network(&specs, 2, 0).unwrap();
    let x = array![[0.5, -1.0], [1.0, 2.0]];
    let trace = forward(&mut layers, &x, Mode::Train { seed: 0 }).unwrap();
    let grads = backward(&layers, &trace, Array2::zeros((2, 2))).unwrap();
    assert!(grads.layers.iter().all(LayerGrad::is_zero));
}

#[test]
fn eval_trace_cannot_backprop() {
    let mut layers = init_network(&[LayerSpec::new(2, Activation::Relu)], 2, 0).unwrap();
    let trace = forward(&mut layers, &array![[1.0, 1.0]], Mode::Eval).unwrap();
    assert_eq!(
        backward(&layers, &trace, Array2::ones((1, 2))).unwrap_err(),
        NnError::ModeMismatch
    );
}

#[test]
fn frozen_layers_get_zero_gradients_and_no_updates() {
    let specs = [LayerSpec::new(4, Activation::Relu), LayerSpec::new(2, Activation::Sigmoid)];
    let mut layers = init_network(&specs, 3, 5).unwrap();
    set_frozen(&mut layers, &[0], true).unwrap();
    assert_eq!(
        set_frozen(&mut layers, &[2], true),
        Err(NnError::IndexOutOfRange { index: 2, len: 2 })
    );
    let x = random_matrix(&mut ChaCha8Rng::seed_from_u64(0), 5, 3);
    let trunk_hash = parameter_hash(&layers[..1]);
    let mut opt = OptimizerState::adam(0.01);
    for step in 0..100 {
        let trace = forward(&mut layers, &x, Mode::Train { seed: step }).unwrap();
        let grads = backward(&layers, &trace, trace.output() - 0.5).unwrap();
        assert!(grads.layers[0].is_zero());
        opt.step(&mut layers, &grads).unwrap();
    }
    assert_eq!(parameter_hash(&layers[..1]), trunk_hash);

    set_frozen(&mut layers, &[0, 1], true).unwrap();
    let all = parameter_hash(&layers);
    let trace = forward(&mut layers, &x, Mode::Train { seed: 0 }).unwrap();
    let grads = backward(&layers, &trace, trace.output() - 0.5).unwrap();
    opt.step(&mut layers, &grads).unwrap();
    assert_eq!(parameter_hash(&layers), all);

    set_frozen(&mut layers, &[0], false).unwrap();
    let trace = forward(&mut layers, &x, Mode::Train { seed: 0 }).unwrap();
    let grads = backward(&layers, &trace, trace.output() - 0.5).unwrap();
    opt.step(&mut layers, &grads).unwrap();
    assert_ne!(parameter_hash(&layers[..1]), trunk_hash);
}

fn single_param_layer(w: f64) -> Vec<DenseLayer> {
    let mut layers = init_network(&[LayerSpec::new(1, Activation::Identity)], 1, 0).unwrap();
    layers[0].weights[[0, 0]] = w;
    layers
}

fn grads_for(layers: &[DenseLayer], gw: f64) -> Gradients {
    let mut g = LayerGrad::zeros_like(&layers[0]);
    g.weights[[0, 0]] = gw;
    Gradients {
        layers: vec![g],
        boundary: vec![],
    }
}

#[test]
fn sgd_applies_plain_update() {
    let mut layers = single_param_layer(1.0);
    let mut opt = OptimizerState::sgd(0.1);
    { let g = grads_for(&layers, 0.5); opt.step(&mut layers, &g) }.unwrap();
    assert!((layers[0].weights[[0, 0]] - 0.95).abs() < 1e-15);
    assert_eq!(opt.t, 1);
}

#[test]
fn adam_first_step_is_about_eta() {
    for g in [0.5, -3.0, 1e-3] {
        let mut layers = single_param_layer(1.0);
        let mut opt = OptimizerState::adam(0.001);
        { let g = grads_for(&layers, g); opt.step(&mut layers, &g) }.unwrap();
        let delta = 1.0 - layers[0].weights[[0, 0]];
        // bias-corrected first moment / sqrt(second) = g / |g|
        let expect = 0.001 * g / (g.abs() + 1e-8);
        assert!((delta - expect).abs() < 1e-15, "{delta} vs {expect}");
    }
}

#[test]
fn zero_gradient_leaves_parameters() {
    for mut opt in [OptimizerState::sgd(0.5), OptimizerState::adam(0.5)] {
        let mut layers = single_param_layer(0.3);
        let before = parameter_hash(&layers);
        for _ in 0..3 {
            { let g = grads_for(&layers, 0.0); opt.step(&mut layers, &g) }.unwrap();
        }
        assert_eq!(parameter_hash(&layers), before);
        assert_eq!(opt.t, 3);
    }
}

#[test]
fn optimizer_kind_and_shape_are_checked() {
    let mut layers = single_param_layer(0.3);
    let grads = grads_for(&layers, 1.0);
    let mut opt = OptimizerState::sgd(0.1);
    assert!(matches!(
        adam_step(&mut layers, &grads, &mut opt),
        Err(NnError::OptimizerMismatch { .. })
    ));
    let bad = Gradients {
        layers: vec![],
        boundary: vec![],
    };
    assert!(matches!(sgd_step(&mut layers, &bad, &mut opt), Err(NnError::Shape(_))));
}

#[test]
fn finite_diff_on_linear_model() {
    // L(w) = (w·x − t)², dL/dw = 2x(w·x − t)
    let (x, t) = (1.7, 0.4);
    let layers = single_param_layer(0.9);
    let loss = |l: &[DenseLayer]| {
        let w = l[0].weights[[0, 0]] + l[0].bias[0];
        (w * x - t).powi(2)
    };
    let num = finite_diff_grad(&layers, loss, 1e-5);
    let exact = 2.0 * x * (0.9 * x - t);
    assert!((num[0].weights[[0, 0]] - exact).abs() < 1e-8);

    let constant = finite_diff_grad(&layers, |_| 3.0, 1e-3);
    assert!(constant[0].is_zero());
}

#[test]
fn finite_diff_error_is_second_order() {
    // d/dw exp(w) at w = 0.5; truncation error ≈ h²/6·exp(w)
    let layers = single_param_layer(0.5);
    let loss = |l: &[DenseLayer]| l[0].weights[[0, 0]].exp();
    let exact = 0.5f64.exp();
    let e1 = (finite_diff_grad(&layers, loss, 1e-2)[0].weights[[0, 0]] - exact).abs();
    let e2 = (finite_diff_grad(&layers, loss, 5e-3)[0].weights[[0, 0]] - exact).abs();
    let ratio = e1 / e2;
    assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn separable_toy_loss_is_non_increasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_matrix(&mut rng, 40, 2);
    let mut y = Array2::zeros((40, 2));
    for r in 0..40 {
        let class = usize::from(x[[r, 0]] + x[[r, 1]] > 0.0);
        y[[r, class]] = 1.0;
    }
    let specs = [LayerSpec::new(2, Activation::Softmax)];
    let mut layers = init_network(&specs, 2, 0).unwrap();
    let mut opt = OptimizerState::sgd(0.1);
    let mut prev = f64::INFINITY;
    for epoch in 0..50 {
        let trace = forward(&mut layers, &x, Mode::Train { seed: epoch }).unwrap();
        let loss = cross_entropy(trace.output(), &y);
        assert!(loss <= prev + 1e-6, "epoch {epoch}: {loss} > {prev}");
        prev = loss;
        let g = softmax_cross_entropy_grad(trace.output(), &y);
        let grads = backward_seeded(&layers, &trace, GradSeed::PreActivation(g)).unwrap();
        opt.step(&mut layers, &grads).unwrap();
    }
}

#[test]
fn sigmoid_stays_inside_unit_interval() {
    let u = array![[-30.0, 0.0, 30.0]];
    let a = Activation::Sigmoid.apply(&u);
    assert!(a.iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let specs = [
            LayerSpec::new(6, Activation::Relu).dropout(0.2).batch_norm(true),
            LayerSpec::new(2, Activation::Softmax),
        ];
        let mut layers = init_network(&specs, 3, 9).unwrap();
        let x = random_matrix(&mut ChaCha8Rng::seed_from_u64(2), 10, 3);
        let y = Array2::from_shape_fn((10, 2), |(r, c)| f64::from(u8::from(r % 2 == c)));
        let mut opt = OptimizerState::adam(0.01);
        for step in 0..20 {
            let trace = forward(&mut layers, &x, Mode::Train { seed: step }).unwrap();
            let g = softmax_cross_entropy_grad(trace.output(), &y);
            let grads = backward_seeded(&layers, &trace, GradSeed::PreActivation(g)).unwrap();
            opt.step(&mut layers, &grads).unwrap();
        }
        parameter_hash(&layers)
    };
    assert_eq!(run(), run());
}
