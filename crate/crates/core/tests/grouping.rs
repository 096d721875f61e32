mod common;

use common::oracles::*;
use common::*;
use dynprune_core::grouping::*;
use dynprune_core::{Tape, Tensor};
use rand::Rng;

#[test]
fn regularizer_matches_scalar_loops() {
    let mut r = rng(10);
    for trial in 0..30 {
        let (cout, cin, n) = (r.gen_range(1..7), r.gen_range(1..6), r.gen_range(1..4));
        let w = rand_tensor(&[cout, cin, 3, 3], &mut r);
        let a = random_alpha(cout, n, &mut r);
        for norm in [NormVariant::QuasiNorm, NormVariant::SumSqrt] {
            let got = layer_regularizer(&w, &a, norm).unwrap();
            let want = r_loops(&w, &a, norm);
            assert!((got - want).abs() < 1e-10, "trial {trial}: {got} vs {want}");
        }
    }
}

#[test]
fn zero_weights_give_zero() {
    let w = Tensor::zeros(&[4, 3, 3, 3]);
    let a = random_alpha(4, 2, &mut rng(1));
    assert_eq!(layer_regularizer(&w, &a, NormVariant::QuasiNorm).unwrap(), 0.0);
    let g = layer_regularizer_grad_w(&w, &a, NormVariant::QuasiNorm).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_group_is_scaled_channel_lasso() {
    let mut r = rng(2);
    let w = rand_tensor(&[5, 4, 3, 3], &mut r);
    let a = Tensor::ones(&[5, 1]);
    let lasso: f64 = (0..4)
        .map(|m| {
            (0..5)
                .flat_map(|k| (0..9).map(move |j| (k, j)))
                .map(|(k, j)| w.data()[(k * 4 + m) * 9 + j].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    let got = layer_regularizer(&w, &a, NormVariant::QuasiNorm).unwrap();
    assert!((got - 25.0 * lasso).abs() < 1e-10);
    let got = layer_regularizer(&w, &a, NormVariant::SumSqrt).unwrap();
    assert!((got - 5.0 * lasso).abs() < 1e-10);
}

#[test]
fn regularizer_is_positively_homogeneous_in_weights() {
    let mut r = rng(3);
    let w = rand_tensor(&[4, 3, 3, 3], &mut r);
    let a = random_alpha(4, 2, &mut r);
    let base = layer_regularizer(&w, &a, NormVariant::QuasiNorm).unwrap();
    for c in [0.1, 2.5, 7.0] {
        let scaled = layer_regularizer(&w.map(|v| c * v), &a, NormVariant::QuasiNorm).unwrap();
        assert!((scaled - c * base).abs() < 1e-10 * (1.0 + c * base));
    }
}

#[test]
fn closed_form_gradients_match_elementary_tape() {
    let mut r = rng(4);
    for norm in [NormVariant::QuasiNorm, NormVariant::SumSqrt] {
        for _ in 0..5 {
            let (cout, cin, n) = (r.gen_range(2..6), r.gen_range(1..5), r.gen_range(1..4));
            let w = rand_tensor(&[cout, cin, 3, 3], &mut r);
            let a = random_alpha(cout, n, &mut r);
            let mut tape = Tape::new();
            let (wv, av) = (tape.param(w.clone()), tape.param(a.clone()));
            let out = r_elementary(&mut tape, wv, av, norm);
            assert!((tape.value(out).item() - layer_regularizer(&w, &a, norm).unwrap()).abs() < 1e-10);
            tape.backward(out).unwrap();
            let gw = layer_regularizer_grad_w(&w, &a, norm).unwrap();
            let ga = layer_regularizer_grad_alpha(&w, &a, norm).unwrap();
            assert!(gw.max_abs_diff(tape.grad(wv).unwrap()) < 1e-10);
            assert!(ga.max_abs_diff(tape.grad(av).unwrap()) < 1e-10);
        }
    }
}

#[test]
fn regularizer_custom_op_passes_finite_differences() {
    let mut r = rng(5);
    let w = rand_tensor(&[4, 3, 3, 3], &mut r);
    let a = random_alpha(4, 2, &mut r);
    let err = grad_check(&[w, a], 40, 6, |tape, v| {
        regularizer_on_tape(tape, v[0], v[1], NormVariant::QuasiNorm).unwrap()
    });
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn mixed_derivative_matches_finite_differences() {
    let mut r = rng(7);
    for norm in [NormVariant::QuasiNorm, NormVariant::SumSqrt] {
        let w = rand_tensor(&[4, 3, 3, 3], &mut r);
        let v = rand_tensor(&[4, 3, 3, 3], &mut r);
        let a = random_alpha(4, 2, &mut r);
        let h_of = |a: &Tensor| layer_regularizer_grad_w(&w, a, norm).unwrap().dot(&v);
        let mixed = layer_regularizer_mixed(&w, &a, &v, norm).unwrap();
        for j in 0..a.numel() {
            let step = 1e-6;
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap.data_mut()[j] += step;
            am.data_mut()[j] -= step;
            let fd = (h_of(&ap) - h_of(&am)) / (2.0 * step);
            let an = mixed.data()[j];
            assert!((fd - an).abs() / an.abs().max(fd.abs()).max(1e-8) < 1e-6, "{j}: {an} vs {fd}");
        }
    }
}

// ---- relaxation -------------------------------------------------------

#[test]
fn uniform_logits_without_noise_are_uniform() {
    for n in 1..5 {
        let p = params_with(Tensor::ones(&[6, n]), 0.5);
        let s = AlphaSample::from_noise(&p, &[Tensor::zeros(&[6, n])]).unwrap();
        for &v in s.layers[0].alpha.data() {
            assert!((v - 1.0 / n as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn samples_are_rows_on_the_simplex() {
    let mut r = rng(8);
    for _ in 0..200 {
        let n = r.gen_range(1..5);
        let pi = Tensor::from_fn(&[5, n], |_| r.gen_range(0.01..10.0));
        let p = params_with(pi, r.gen_range(0.1..2.0));
        let s = sample_alpha(&p, &mut r).unwrap();
        for row in s.layers[0].alpha.data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0 && v <= 1.0));
        }
    }
}

#[test]
fn low_temperature_is_nearly_one_hot() {
    // log-gap of at least one between the best and second logit
    let pi = Tensor::new(vec![2, 3], vec![1.0, std::f64::consts::E, 0.5, 9.0, 1.0, 2.0]).unwrap();
    let p = params_with(pi, 0.01);
    let s = AlphaSample::from_noise(&p, &[Tensor::zeros(&[2, 3])]).unwrap();
    let a = &s.layers[0].alpha;
    assert!(a.data()[1] > 0.99);
    assert!(a.data()[3] > 0.99);
}

#[test]
fn non_positive_logits_are_domain_errors() {
    let p = params_with(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), 0.5);
    assert!(matches!(sample_alpha(&p, &mut rng(0)), Err(dynprune_core::Error::Domain { .. })));
}

#[test]
fn gumbel_max_frequencies_match_probabilities() {
    let pi = Tensor::new(vec![1, 3], vec![0.5, 1.5, 3.0]).unwrap();
    let total: f64 = pi.data().iter().sum();
    let p = params_with(pi.clone(), 1.0);
    let mut r = rng(9);
    let mut counts = [0usize; 3];
    let draws = 100_000;
    for _ in 0..draws {
        let s = sample_alpha(&p, &mut r).unwrap();
        counts[s.layers[0].alpha.argmax_rows()[0]] += 1;
    }
    for j in 0..3 {
        let freq = counts[j] as f64 / draws as f64;
        let want = pi.data()[j] / total;
        assert!((freq - want).abs() < 0.01, "category {j}: {freq} vs {want}");
    }
}

// ---- unrolled gradient ----------------------------------------------------

#[test]
fn alpha_gradient_matches_composed_finite_differences() {
    for (lambda, eps) in [(0.1, 0.05), (1e-3, 0.1), (0.5, 0.2)] {
        let err = check_alpha_gradient_fd(lambda, eps, NormVariant::QuasiNorm);
        assert!(err < 1e-4, "lambda {lambda} eps {eps}: relative error {err}");
    }
    let err = check_alpha_gradient_fd(0.1, 0.05, NormVariant::SumSqrt);
    assert!(err < 1e-4, "sum-sqrt: relative error {err}");
}

#[test]
fn alpha_gradient_without_unrolling_is_regularizer_gradient() {
    let net = toy_layer_net(13);
    let (pi, g) = pi_and_noise(14);
    let params = params_with(pi, 0.5);
    let sample = AlphaSample::from_noise(&params, &[g]).unwrap();
    let cfg = GroupLearnConfig { lambda: 0.2, ..Default::default() };
    let (x, y) = toy_batch(1);
    let ag = alpha_gradient(&net, &params, &sample, &cfg, &x, &y, 0.0).unwrap();
    let direct = layer_regularizer_grad_alpha(net.conv_weight(0).unwrap(), &sample.layers[0].alpha, cfg.norm)
        .unwrap()
        .map(|v| v * 0.2 * 6.0);
    assert_eq!(ag.d_alpha[0], direct);
}

#[test]
fn alpha_gradient_vanishes_without_regularizer() {
    let net = toy_layer_net(15);
    let (pi, g) = pi_and_noise(16);
    let params = params_with(pi, 0.5);
    let sample = AlphaSample::from_noise(&params, &[g]).unwrap();
    let cfg = GroupLearnConfig { lambda: 0.0, ..Default::default() };
    let (x, y) = toy_batch(2);
    let ag = alpha_gradient(&net, &params, &sample, &cfg, &x, &y, 0.1).unwrap();
    assert!(ag.d_pi[0].data().iter().all(|&v| v == 0.0));
}

#[test]
fn one_step_adapt_cases() {
    let net = toy_layer_net(17);
    let (pi, g) = pi_and_noise(18);
    let params = params_with(pi, 0.5);
    let sample = AlphaSample::from_noise(&params, &[g]).unwrap();
    let (x, y) = toy_batch(3);
    let cfg = GroupLearnConfig { lambda: 0.3, ..Default::default() };

    // ε = 0 leaves every weight untouched
    let same = one_step_adapt(&net, &sample, &cfg, &x, &y, 0.0).unwrap();
    assert_eq!(same.params, net.params);

    // λ = 0 is a plain SGD step
    let (_, grads) = net_loss_grads(&net, &x, &y);
    let plain_cfg = GroupLearnConfig { lambda: 0.0, ..cfg.clone() };
    let plain = one_step_adapt(&net, &sample, &plain_cfg, &x, &y, 0.1).unwrap();
    for ((a, p), g) in plain.trainable().into_iter().zip(net.trainable()).zip(&grads) {
        let mut want = p.clone();
        want.add_scaled(g, -0.1);
        assert!(a.max_abs_diff(&want) < 1e-12);
    }

    // general case: hand-composed from separate ∇L and ∇R
    let adapted = one_step_adapt(&net, &sample, &cfg, &x, &y, 0.1).unwrap();
    let gr = layer_regularizer_grad_w(net.conv_weight(0).unwrap(), &sample.layers[0].alpha, cfg.norm).unwrap();
    for (i, ((a, p), g)) in adapted.trainable().into_iter().zip(net.trainable()).zip(&grads).enumerate() {
        let mut want = p.clone();
        want.add_scaled(g, -0.1);
        if i == 0 {
            want.add_scaled(&gr, -0.1 * 0.3 * 6.0);
        }
        assert!(a.max_abs_diff(&want) < 1e-12, "tensor {i}");
    }
}

fn tiny_split(seed: u64, n: usize) -> dynprune_core::data::Split {
    let mut r = rng(seed);
    let images = (0..n * 75).map(|_| r.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| r.gen_range(0..5u8)).collect();
    dynprune_core::data::Split::new(images, labels, [3, 5, 5]).unwrap()
}

#[test]
fn group_learning_is_bit_deterministic() {
    let data = tiny_split(20, 64);
    for freeze_noise in [false, true] {
        let cfg = GroupLearnConfig {
            epochs: 2,
            batch_size: 16,
            lambda: 0.01,
            freeze_noise,
            seed: 5,
            ..Default::default()
        };
        let run = || {
            let mut net = toy_layer_net(21);
            let (p, hist) = group_learning_phase(&mut net, &data, Some(&data), &cfg, AlphaSource::Learned, |_| {}).unwrap();
            (net, p, hist.iter().map(|h| (h.loss.to_bits(), h.regularizer.to_bits())).collect::<Vec<_>>())
        };
        let (n1, p1, h1) = run();
        let (n2, p2, h2) = run();
        assert_eq!(n1, n2);
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        assert_ne!(p1.layers[0].pi, Tensor::ones(&[4, 2]), "logits should move");
    }
}

#[test]
fn single_group_learning_equals_fixed_ones() {
    let data = tiny_split(22, 48);
    let cfg = GroupLearnConfig {
        epochs: 2,
        batch_size: 12,
        groups: 1,
        lambda: 0.05,
        ..Default::default()
    };
    let mut a = toy_layer_net(23);
    let mut b = a.clone();
    let (pa, ha) = group_learning_phase(&mut a, &data, None, &cfg, AlphaSource::Learned, |_| {}).unwrap();
    let (pb, hb) = group_learning_phase(&mut b, &data, None, &cfg, AlphaSource::FixedOnes, |_| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(pa.layers[0].pi, Tensor::ones(&[4, 1]));
    assert_eq!(pa, pb);
    assert_eq!(ha.iter().map(|h| h.loss).collect::<Vec<_>>(), hb.iter().map(|h| h.loss).collect::<Vec<_>>());
}

#[test]
fn regularizer_off_matches_plain_training() {
    let data = tiny_split(24, 48);
    let cfg = GroupLearnConfig { epochs: 2, batch_size: 12, lambda: 0.0, ..Default::default() };
    let mut a = toy_layer_net(25);
    let mut b = a.clone();
    group_learning_phase(&mut a, &data, None, &cfg, AlphaSource::Learned, |_| {}).unwrap();
    let cfg_b = GroupLearnConfig { groups: 3, ..cfg };
    group_learning_phase(&mut b, &data, None, &cfg_b, AlphaSource::Learned, |_| {}).unwrap();
    // with λ = 0 the groups never influence the weights
    assert_eq!(a, b);
}
