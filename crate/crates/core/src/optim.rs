//! Momentum SGD and Adam over lists of tensors.

use crate::tensor::Tensor;

/// Heavy-ball SGD: `v ← μv + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Tensor::scalar(1.0);
        let g = [Tensor::scalar(1.0)];
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(vec![&mut p], &g);
        assert!((p.item() - 0.9).abs() < 1e-15);
        opt.step(vec![&mut p], &g);
        assert!((p.item() - (0.9 - 0.1 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = Adam::new(0.001, 0.9, 0.999);
        opt.step(vec![&mut p], &[Tensor::scalar(5.0)]);
        assert!((p.item() + 0.001).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::scalar(2.0);
        let mut opt = Adam::new(0.001, 0.9, 0.999);
        for _ in 0..5 {
            opt.step(vec![&mut p], &[Tensor::scalar(0.0)]);
        }
        assert_eq!(p.item(), 2.0);
    }
}
