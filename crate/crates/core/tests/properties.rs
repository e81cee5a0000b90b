use proptest::prelude::*;

use smoothtaylor::attribution::{integrated_gradients, smooth_taylor, NoiseConfig};
use smoothtaylor::autodiff::{Layer, Model, ScoreTarget};
use smoothtaylor::toy::{self, Activation};
use smoothtaylor::Tensor;

/// Same function as `model` (flatten-free MLP), hidden units of the first
/// layer listed in a different order.
fn permute_first_hidden(model: &Model, perm: &[usize]) -> Model {
    let mut layers = model.layers().to_vec();
    let (w1, b1) = match &layers[0] {
        Layer::Dense { weight, bias } => (weight.clone(), bias.clone()),
        _ => panic!("expected dense first layer"),
    };
    let n_in = w1.shape()[1];
    let mut w = Vec::with_capacity(w1.len());
    let mut b = Vec::with_capacity(b1.len());
    for &p in perm {
        w.extend_from_slice(&w1.data()[p * n_in..(p + 1) * n_in]);
        b.push(b1.data()[p]);
    }
    layers[0] = Layer::Dense {
        weight: Tensor::new(w1.shape().to_vec(), w).unwrap(),
        bias: Tensor::new(b1.shape().to_vec(), b).unwrap(),
    };
    let (w2, b2) = match &layers[2] {
        Layer::Dense { weight, bias } => (weight.clone(), bias.clone()),
        _ => panic!("expected dense third layer"),
    };
    let (n_out, n_hid) = (w2.shape()[0], w2.shape()[1]);
    let mut w = vec![0.0f32; w2.len()];
    for o in 0..n_out {
        for (k, &p) in perm.iter().enumerate() {
            w[o * n_hid + k] = w2.data()[o * n_hid + p];
        }
    }
    layers[2] = Layer::Dense {
        weight: Tensor::new(w2.shape().to_vec(), w).unwrap(),
        bias: b2,
    };
    Model::new(model.input_shape().to_vec(), layers).unwrap()
}

#[test]
fn functionally_equal_nets_get_equal_attributions() {
    let a = toy::random_mlp(3, 6, &[10], 2, Activation::Softplus);
    let perm: Vec<usize> = (0..10).rev().collect();
    let b = permute_first_hidden(&a, &perm);
    let x = toy::random_input(4, &[6], 1.0);
    let z = Tensor::zeros(vec![6]);
    let t = ScoreTarget::logit(1);
    assert!((a.score(&x, t).unwrap() - b.score(&x, t).unwrap()).abs() < 1e-6);
    let ig = |m: &Model| integrated_gradients(m, &x, &z, t, 40).unwrap().values;
    assert!(ig(&a).max_abs_diff(&ig(&b)) < 1e-5);
    let st = |m: &Model| smooth_taylor(m, &x, t, &NoiseConfig::new(0.3, 50, 8)).unwrap().values;
    assert!(st(&a).max_abs_diff(&st(&b)) < 1e-5);
}

fn l2(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn smooth_taylor_norm_scales_with_sigma_on_linear_models() {
    let w: Vec<f32> = toy::random_input(1, &[16], 2.0).into_data();
    let model = toy::linear(&w, 0.3);
    let x = toy::random_input(2, &[16], 1.0);
    let t = ScoreTarget::logit(0);
    let norm = |sigma: f64| {
        l2(&smooth_taylor(&model, &x, t, &NoiseConfig::new(sigma, 10_000, 6))
            .unwrap()
            .values)
    };
    let ratio = norm(0.2) / norm(0.1);
    assert!((1.8..=2.2).contains(&ratio), "{ratio}");
}

#[test]
fn ig_is_exact_for_linear_models_at_one_step() {
    let model = toy::linear(&[2.0, 3.0], 0.0);
    let x = Tensor::from_vec(vec![1.0, 1.0]).unwrap();
    let z = Tensor::zeros(vec![2]);
    let m = integrated_gradients(&model, &x, &z, ScoreTarget::logit(0), 1).unwrap();
    assert_eq!(m.values.data(), &[2.0, 3.0]);
    assert!((m.values.sum() - 5.0).abs() < 1e-12);
}

#[test]
fn quadratic_ig_follows_right_endpoint_sum() {
    // f(x) = x² as a square layer after a one-weight dense layer.
    let model = Model::new(
        vec![1],
        vec![
            Layer::Dense {
                weight: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
                bias: Tensor::zeros(vec![1]),
            },
            Layer::Square,
        ],
    )
    .unwrap();
    let x = Tensor::from_vec(vec![2.0]).unwrap();
    let z = Tensor::zeros(vec![1]);
    let ig = |m| {
        integrated_gradients(&model, &x, &z, ScoreTarget::logit(0), m)
            .unwrap()
            .values
            .data()[0] as f64
    };
    assert!((ig(2) - 6.0).abs() < 1e-6);
    assert!((ig(200) - 4.0).abs() <= 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Right-endpoint sampling leaves a first-order completeness error, so
    /// doubling the step count halves it.
    #[test]
    fn ig_completeness_error_is_first_order(seed in 0u64..1000) {
        let model = toy::random_mlp(seed, 5, &[8], 2, Activation::Softplus);
        let x = toy::random_input(seed + 1, &[5], 1.0);
        let z = toy::random_input(seed + 2, &[5], 1.0);
        let t = ScoreTarget::logit(0);
        let delta = model.score(&x, t).unwrap() - model.score(&z, t).unwrap();
        let err = |m| integrated_gradients(&model, &x, &z, t, m).unwrap().values.sum() - delta;
        let ratio = err(150) / err(300);
        prop_assert!((1.8..=2.2).contains(&ratio), "ratio {ratio} errors {} {}", err(150), err(300));
    }

    /// The completeness gap of SmoothTaylor is the mean second-order Taylor
    /// remainder at the roots. For one softplus layer the curvature along `ε`
    /// is at most `Σ_j |v_j| (w_j·ε)² / 4`, which bounds the gap.
    #[test]
    fn smooth_taylor_completeness_gap_is_second_order(seed in 0u64..1000) {
        let model = toy::random_mlp(seed, 5, &[8], 2, Activation::Softplus);
        let x = toy::random_input(seed + 3, &[5], 1.0);
        let c = 1;
        let t = ScoreTarget::logit(c);
        let dense = |i: usize| match &model.layers()[i] {
            Layer::Dense { weight, .. } => weight.clone(),
            _ => panic!("expected dense layer {i}"),
        };
        let (w1, w2) = (dense(0), dense(2));
        let (n_hid, n_in) = (w1.shape()[0], w1.shape()[1]);
        let cfg = NoiseConfig::new(0.1, 64, seed);
        let fx = model.score(&x, t).unwrap();
        let (mut mean, mut bound) = (0.0, 0.0);
        for r in 0..64 {
            let z = smoothtaylor::attribution::root(&x, &cfg, r).unwrap();
            mean += (fx - model.score(&z, t).unwrap()) / 64.0;
            for j in 0..n_hid {
                let proj: f64 = (0..n_in)
                    .map(|i| w1.data()[j * n_in + i] as f64 * (x.data()[i] - z.data()[i]) as f64)
                    .sum();
                bound += (w2.data()[c * n_hid + j] as f64).abs() * proj * proj / 8.0 / 64.0;
            }
        }
        let st = smooth_taylor(&model, &x, t, &cfg).unwrap().values.sum();
        prop_assert!((st - mean).abs() <= bound + 1e-5, "gap {} bound {bound}", st - mean);
    }

    #[test]
    fn attribution_is_deterministic(seed in 0u64..1000) {
        let model = toy::random_conv_net(seed, [1, 8, 8], 3);
        let x = toy::random_image(seed, &[1, 8, 8]);
        let t = ScoreTarget::probability(model.predict(&x).unwrap());
        let cfg = NoiseConfig::new(0.4, 16, seed);
        let a = smooth_taylor(&model, &x, t, &cfg).unwrap().values;
        let b = smooth_taylor(&model, &x, t, &cfg).unwrap().values;
        prop_assert_eq!(a.data(), b.data());
    }
}
