//! Finite-difference checks of every differentiable tape operation,
//! shared by the unit tests and the acceptance binary.

use dynprune_core::grouping::{alpha_on_tape, gumbel_noise, regularizer_on_tape, NormVariant};
use dynprune_core::{Tape, Tensor, Var};

use super::oracles::random_alpha;
use super::{grad_check, project, rand_tensor, rng};

fn check(out: &mut Vec<(&'static str, f64)>, name: &'static str, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) {
    out.push((name, grad_check(inputs, 20, 99, build)));
}


fn fd_elementwise(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(10);
    let a = rand_tensor(&[3, 4], &mut r);
    let b = rand_tensor(&[3, 4], &mut r);
    let s = Tensor::scalar(0.7);
    let pos = a.map(|v| v.abs() + 0.5);
    check(out, "add", &[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 1)
    });
    check(out, "sub", &[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        project(t, y, 2)
    });
    check(out, "mul", &[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, 3)
    });
    check(out, "scalar mul", &[a.clone(), s.clone()], |t, v| {
        let y = t.mul(v[1], v[0]).unwrap();
        project(t, y, 4)
    });
    check(out, "scalar add", &[a.clone(), s], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 5)
    });
    check(out, "scale", &[a.clone()], |t, v| {
        let y = t.scale(v[0], -2.5);
        project(t, y, 6)
    });
    check(out, "sum", &[a.clone()], |t, v| {
        let y = t.sum(v[0]);
        t.mul(y, y).unwrap()
    });
    check(out, "sqrt", &[pos.clone()], |t, v| {
        let y = t.sqrt(v[0]).unwrap();
        project(t, y, 7)
    });
    check(out, "pow", &[pos.clone()], |t, v| {
        let y = t.pow(v[0], 1.5).unwrap();
        project(t, y, 8)
    });
    check(out, "exp", &[a.clone()], |t, v| {
        let y = t.exp(v[0]);
        project(t, y, 9)
    });
    check(out, "log", &[pos], |t, v| {
        let y = t.log(v[0]).unwrap();
        project(t, y, 10)
    });
    check(out, "relu", &[a.clone()], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 11)
    });
    check(out, "reshape", &[a], |t, v| {
        let y = t.reshape(v[0], &[2, 6]).unwrap();
        project(t, y, 12)
    });
}

fn fd_linear(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(11);
    let x = rand_tensor(&[4, 5], &mut r);
    let w = rand_tensor(&[3, 5], &mut r);
    let b = rand_tensor(&[3], &mut r);
    check(out, "linear", &[x, w, b], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
        project(t, y, 20)
    });
}

fn fd_conv2d(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(12);
    let x = rand_tensor(&[2, 3, 6, 5], &mut r);
    let w = rand_tensor(&[4, 3, 3, 3], &mut r);
    let b = rand_tensor(&[4], &mut r);
    check(out, "conv2d", &[x.clone(), w.clone(), b], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
        project(t, y, 21)
    });
    check(out, "conv2d stride 2", &[x, w], |t, v| {
        let y = t.conv2d(v[0], v[1], None, 2, 1).unwrap();
        project(t, y, 22)
    });
}

fn fd_grouped_conv2d(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(13);
    let x = rand_tensor(&[2, 4, 5, 5], &mut r);
    let w0 = rand_tensor(&[2, 3, 3, 3], &mut r);
    let w1 = rand_tensor(&[3, 2, 3, 3], &mut r);
    let gathers = vec![vec![0, 1, 3], vec![1, 2]];
    check(out, "grouped_conv2d", &[x, w0, w1], |t, v| {
        let y = t.grouped_conv2d(v[0], &[v[1], v[2]], &gathers, None, 1, 1).unwrap();
        project(t, y, 23)
    });
}

fn fd_maxpool(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(14);
    let x = rand_tensor(&[2, 2, 6, 6], &mut r);
    check(out, "maxpool2d", &[x], |t, v| {
        let y = t.maxpool2d(v[0], 2, 2).unwrap();
        project(t, y, 24)
    });
}

fn fd_batchnorm_train_and_eval(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(15);
    let x = rand_tensor(&[3, 2, 3, 3], &mut r);
    let g = rand_tensor(&[2], &mut r);
    let b = rand_tensor(&[2], &mut r);
    check(out, "batchnorm2d train", &[x.clone(), g.clone(), b.clone()], |t, v| {
        let (y, _) = t.batchnorm2d_train(v[0], v[1], v[2], 1e-5).unwrap();
        project(t, y, 25)
    });
    check(out, "batchnorm2d eval", &[x, g, b], |t, v| {
        let y = t.batchnorm2d_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 1.5], 1e-5).unwrap();
        project(t, y, 26)
    });
}

fn fd_softmax_and_cross_entropy(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(16);
    let x = rand_tensor(&[4, 5], &mut r);
    check(out, "softmax_rows", &[x.clone()], |t, v| {
        let y = t.softmax_rows(v[0]).unwrap();
        project(t, y, 27)
    });
    check(out, "softmax_cross_entropy", &[x], |t, v| t.softmax_cross_entropy(v[0], &[0, 4, 2, 2]).unwrap());
}

fn fd_mask_channels(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(17);
    let x = rand_tensor(&[2, 3, 2, 2], &mut r);
    check(out, "mask_channels", &[x], |t, v| {
        let y = t.mask_channels(v[0], &[true, false, true]).unwrap();
        project(t, y, 28)
    });
}

pub fn composite(t: &mut Tape, v: &[Var]) -> Var {
    let y = t.conv2d(v[0], v[1], None, 1, 1).unwrap();
    let (y, _) = t.batchnorm2d_train(y, v[2], v[3], 1e-5).unwrap();
    let y = t.relu(y);
    let y = t.maxpool2d(y, 2, 2).unwrap();
    let y = t.reshape(y, &[2, 12]).unwrap();
    let y = t.linear(y, v[4], None).unwrap();
    let ce = t.softmax_cross_entropy(y, &[1, 2]).unwrap();
    let sq = t.mul(v[1], v[1]).unwrap();
    let reg = t.sum(sq);
    let reg = t.scale(reg, 1e-2);
    t.add(ce, reg).unwrap()
}

pub fn composite_inputs() -> Vec<Tensor> {
    let mut r = rng(18);
    vec![
        rand_tensor(&[2, 2, 4, 4], &mut r),
        rand_tensor(&[3, 2, 3, 3], &mut r),
        rand_tensor(&[3], &mut r),
        rand_tensor(&[3], &mut r),
        rand_tensor(&[3, 12], &mut r),
    ]
}

fn fd_composite(out: &mut Vec<(&'static str, f64)>) {
    check(out, "composite graph", &composite_inputs(), composite);
}


fn fd_grouping_ops(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(19);
    let w = rand_tensor(&[4, 3, 3, 3], &mut r);
    let a = random_alpha(4, 2, &mut r);
    for (name, norm) in [("group regularizer (quasi-norm)", NormVariant::QuasiNorm), ("group regularizer (sum-sqrt)", NormVariant::SumSqrt)] {
        check(out, name, &[w.clone(), a.clone()], |t, v| regularizer_on_tape(t, v[0], v[1], norm).unwrap());
    }
    let pi = Tensor::uniform(&[4, 3], 0.2, 2.0, &mut r);
    let g = gumbel_noise(&[4, 3], &mut r);
    check(out, "gumbel-softmax relaxation", &[pi], |t, v| {
        let y = alpha_on_tape(t, v[0], &g, 0.5).unwrap();
        project(t, y, 29)
    });
}

/// Worst relative error of reverse mode against central differences for
/// every operation, by name.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    fd_elementwise(&mut out);
    fd_linear(&mut out);
    fd_conv2d(&mut out);
    fd_grouped_conv2d(&mut out);
    fd_maxpool(&mut out);
    fd_batchnorm_train_and_eval(&mut out);
    fd_softmax_and_cross_entropy(&mut out);
    fd_mask_channels(&mut out);
    fd_grouping_ops(&mut out);
    fd_composite(&mut out);
    out
}
