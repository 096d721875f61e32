#![allow(dead_code)]

pub mod fd;
pub mod nets;
pub mod oracles;

use dynprune_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Worst relative error between reverse-mode and central finite differences
/// over up to `coords` random coordinates of every input.
///
/// `build` must produce a scalar. Pairs whose magnitudes are both below
/// `1e-7` are compared absolutely instead.
pub fn grad_check(
    inputs: &[Tensor],
    coords: usize,
    seed: u64,
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let h = 1e-5;
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.numel();
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            (0..coords).map(|_| r.gen_range(0..n)).collect()
        };
        for j in picks {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

/// Contracts `out` with a fixed pseudo-random tensor so every output
/// coordinate contributes a distinct weight to the scalar.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = rand_tensor(&shape, &mut rng(seed));
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Direct six-loop convolution.
pub fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (b, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    let xd = x.data();
    let wdt = w.data();
    let od = out.data_mut();
    for n in 0..b {
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map(|t| t.data()[o]).unwrap_or(0.0);
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((n * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * wdt[((o * cin + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    od[((n * cout + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Scatters per-group weights into a zeroed dense `[ΣF, Cin, Kh, Kw]` tensor.
pub fn scatter_groups(weights: &[Tensor], gathers: &[Vec<usize>], cin: usize) -> Tensor {
    let (kh, kw) = (weights[0].dim(2), weights[0].dim(3));
    let total: usize = weights.iter().map(|w| w.dim(0)).sum();
    let mut dense = Tensor::zeros(&[total, cin, kh, kw]);
    let mut row = 0;
    for (w, gather) in weights.iter().zip(gathers) {
        for f in 0..w.dim(0) {
            for (j, &c) in gather.iter().enumerate() {
                for k in 0..kh * kw {
                    dense.data_mut()[((row * cin + c) * kh * kw) + k] =
                        w.data()[(f * gather.len() + j) * kh * kw + k];
                }
            }
            row += 1;
        }
    }
    dense
}

/// MNIST location: `DYNPRUNE_MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> std::path::PathBuf {
    std::env::var_os("DYNPRUNE_MNIST_DIR")
        .map(Into::into)
        .unwrap_or_else(|| {
            std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
        })
}

/// Exhaustive ratio-bound oracle over every subset of `scores` (at most 16
/// entries): the largest cardinality whose summed score stays strictly below
/// `beta` of the total, and the smallest sum achieving it. A zero total
/// counts as ratio zero.
pub fn subset_oracle(scores: &[f64], beta: f64) -> (usize, f64) {
    assert!(scores.len() <= 16);
    let total: f64 = scores.iter().sum();
    let mut best = (0usize, 0.0f64);
    for mask in 0u32..(1 << scores.len()) {
        let sum: f64 = (0..scores.len()).filter(|i| mask >> i & 1 == 1).map(|i| scores[i]).sum();
        let ratio = if total > 0.0 { sum / total } else { 0.0 };
        let card = mask.count_ones() as usize;
        if ratio < beta && (card > best.0 || (card == best.0 && sum < best.1)) {
            best = (card, sum);
        }
    }
    best
}

/// Random non-negative scores with occasional exact zeros and duplicates.
pub fn random_scores(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0 => 0.0,
            1 => 0.5,
            _ => rng.gen_range(0.0..2.0),
        })
        .collect();
    if len > 0 && rng.gen_bool(0.05) {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    v
}
