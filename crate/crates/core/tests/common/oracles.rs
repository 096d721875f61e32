//! Independent references for the grouping code: the regularizer by scalar
//! loops and by elementary tape ops, and the unrolled objective whose
//! finite differences check the alpha gradient.

use dynprune_core::grouping::*;
use dynprune_core::model::{ConvLayerSpec, LayerSpec, Mode, Network, NetworkSpec};
use dynprune_core::{Tape, Tensor, Var};
use rand::Rng;

use super::{rand_tensor, rng};

/// Direct summation of the regularizer with scalar loops.
pub fn r_loops(w: &Tensor, alpha: &Tensor, norm: NormVariant) -> f64 {
    let (cout, cin, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let n = alpha.dim(1);
    let mut total = 0.0;
    for p in 0..n {
        let mut root_sum = 0.0;
        for k in 0..cout {
            root_sum += alpha.data()[k * n + p].sqrt();
        }
        let s = match norm {
            NormVariant::QuasiNorm => root_sum * root_sum,
            NormVariant::SumSqrt => root_sum,
        };
        for m in 0..cin {
            let mut acc = 0.0;
            for k in 0..cout {
                let a = alpha.data()[k * n + p];
                for y in 0..kh {
                    for x in 0..kw {
                        let v = a * w.data()[((k * cin + m) * kh + y) * kw + x];
                        acc += v * v;
                    }
                }
            }
            total += s * acc.sqrt();
        }
    }
    total
}

/// The regularizer assembled from elementary tape operations only; entries
/// are picked out with one-hot masks.
pub fn r_elementary(tape: &mut Tape, w: Var, alpha: Var, norm: NormVariant) -> Var {
    let ws = tape.value(w).shape().to_vec();
    let (cout, cin, area) = (ws[0], ws[1], ws[2] * ws[3]);
    let n = tape.value(alpha).dim(1);
    let pick_alpha = |tape: &mut Tape, k: usize, p: usize| {
        let mut e = Tensor::zeros(&[cout, n]);
        e.data_mut()[k * n + p] = 1.0;
        let e = tape.constant(e);
        let prod = tape.mul(alpha, e).unwrap();
        tape.sum(prod)
    };
    let w2 = tape.mul(w, w).unwrap();
    let mut q = vec![vec![]; cout];
    for (k, row) in q.iter_mut().enumerate() {
        for m in 0..cin {
            let mut e = Tensor::zeros(&ws);
            for j in 0..area {
                e.data_mut()[(k * cin + m) * area + j] = 1.0;
            }
            let e = tape.constant(e);
            let prod = tape.mul(w2, e).unwrap();
            row.push(tape.sum(prod));
        }
    }
    let mut total: Option<Var> = None;
    for p in 0..n {
        let a: Vec<Var> = (0..cout).map(|k| pick_alpha(tape, k, p)).collect();
        let mut root_sum = tape.sqrt(a[0]).unwrap();
        for &ak in &a[1..] {
            let r = tape.sqrt(ak).unwrap();
            root_sum = tape.add(root_sum, r).unwrap();
        }
        let s = match norm {
            NormVariant::QuasiNorm => tape.pow(root_sum, 2.0).unwrap(),
            NormVariant::SumSqrt => root_sum,
        };
        for m in 0..cin {
            let mut acc: Option<Var> = None;
            for k in 0..cout {
                let a2 = tape.mul(a[k], a[k]).unwrap();
                let term = tape.mul(a2, q[k][m]).unwrap();
                acc = Some(match acc {
                    Some(v) => tape.add(v, term).unwrap(),
                    None => term,
                });
            }
            let norm_pm = tape.sqrt(acc.unwrap()).unwrap();
            let term = tape.mul(s, norm_pm).unwrap();
            total = Some(match total {
                Some(v) => tape.add(v, term).unwrap(),
                None => term,
            });
        }
    }
    total.unwrap()
}

pub fn random_alpha(cout: usize, n: usize, rng: &mut impl Rng) -> Tensor {
    let mut a = Tensor::from_fn(&[cout, n], |_| rng.gen_range(0.05..1.0));
    for row in a.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

pub fn params_with(pi: Tensor, tau: f64) -> GroupParameters {
    let n = pi.dim(1);
    GroupParameters {
        layers: vec![LayerGroups { layer: 0, pi }],
        tau,
        groups: n,
    }
}

/// Conv(3→4, 3×3, grouped) → BN → ReLU → Linear on 3×5×5 inputs.
pub fn toy_layer_net(seed: u64) -> Network {
    let spec = NetworkSpec {
        layers: vec![
            LayerSpec::Conv(ConvLayerSpec {
                out_channels: 4,
                in_channels: 3,
                kernel: (3, 3),
                stride: 1,
                padding: 1,
                has_bias: false,
                grouped: true,
            }),
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 100,
                out_features: 5,
            },
        ],
        classes: 5,
        input_shape: [3, 5, 5],
    };
    Network::init(spec, &mut rng(seed)).unwrap()
}

pub fn toy_batch(seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let x = rand_tensor(&[6, 3, 5, 5], &mut r);
    let y = (0..6).map(|_| r.gen_range(0..5)).collect();
    (x, y)
}

pub fn softmax_alpha(pi: &Tensor, g: &Tensor, tau: f64) -> Tensor {
    let n = pi.dim(1);
    let mut out = pi.clone();
    for (k, row) in out.data_mut().chunks_mut(n).enumerate() {
        let z: Vec<f64> = (0..n).map(|j| (pi.data()[k * n + j].ln() + g.data()[k * n + j]) / tau).collect();
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..n {
            row[j] = e[j] / s;
        }
    }
    out
}

/// Training-mode loss and gradients through the model's own tape.
pub fn net_loss_grads(net: &Network, x: &Tensor, y: &[usize]) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = net.bind(&mut tape, true);
    let out = net.forward_tape(&mut tape, xv, &pv, Mode::Train, None).unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, y).unwrap();
    tape.backward(loss).unwrap();
    let grads = pv.flat().map(|v| tape.grad(v).unwrap().clone()).collect();
    (tape.value(loss).item(), grads)
}

/// `L(W′) + λ_i R(W′, α)` with `W′ = W − ε(∇L + λ_i ∇_W R)`, all from
/// independent pieces: elementary-tape regularizer gradient and scalar-loop
/// regularizer value.
pub fn composed_objective(net: &Network, pi: &Tensor, g: &Tensor, tau: f64, lambda: f64, eps: f64, norm: NormVariant) -> f64 {
    let (x, y) = toy_batch(100);
    let alpha = softmax_alpha(pi, g, tau);
    let scale = lambda * 6.0; // sqrt(4·3·3)
    let (_, mut grads) = net_loss_grads(net, &x, &y);
    let w = net.conv_weight(0).unwrap().clone();
    let mut tape = Tape::new();
    let wv = tape.param(w);
    let av = tape.constant(alpha.clone());
    let rv = r_elementary(&mut tape, wv, av, norm);
    tape.backward(rv).unwrap();
    grads[0].add_scaled(tape.grad(wv).unwrap(), scale);
    let mut adapted = net.clone();
    for (p, gr) in adapted.trainable_mut().into_iter().zip(&grads) {
        p.add_scaled(gr, -eps);
    }
    let (loss, _) = net_loss_grads(&adapted, &x, &y);
    loss + scale * r_loops(adapted.conv_weight(0).unwrap(), &alpha, norm)
}

pub fn pi_and_noise(seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    let pi = Tensor::from_fn(&[4, 2], |_| r.gen_range(0.3..2.0));
    let g = gumbel_noise(&[4, 2], &mut r);
    (pi, g)
}

pub fn check_alpha_gradient_fd(lambda: f64, eps: f64, norm: NormVariant) -> f64 {
    let net = toy_layer_net(11);
    let (pi, g) = pi_and_noise(12);
    let tau = 0.5;
    let cfg = GroupLearnConfig { lambda, tau, norm, ..Default::default() };
    let params = params_with(pi.clone(), tau);
    let sample = AlphaSample::from_noise(&params, &[g.clone()]).unwrap();
    let (x, y) = toy_batch(100);
    let ag = alpha_gradient(&net, &params, &sample, &cfg, &x, &y, eps).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..pi.numel() {
        let h = 1e-5;
        let (mut pp, mut pm) = (pi.clone(), pi.clone());
        pp.data_mut()[j] += h;
        pm.data_mut()[j] -= h;
        let fd = (composed_objective(&net, &pp, &g, tau, lambda, eps, norm)
            - composed_objective(&net, &pm, &g, tau, lambda, eps, norm))
            / (2.0 * h);
        let an = ag.d_pi[0].data()[j];
        let scale = an.abs().max(fd.abs());
        let err = if scale < 1e-9 { (an - fd).abs() } else { (an - fd).abs() / scale };
        worst = worst.max(err);
    }
    worst
}
