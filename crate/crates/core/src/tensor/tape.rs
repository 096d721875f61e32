//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and whatever it needs for
//! the backward pass. Nodes only ever reference earlier nodes, so the list is
//! already in topological order and `backward` is a single reverse sweep.

use super::conv::{self, ConvGeometry, GroupKernel};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose gradient is supplied in closed form by the caller.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input, given the output gradient.
    /// `None` means the input receives no contribution.
    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

/// Per-channel statistics of one training-mode batchnorm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the convention used for running estimates.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Sqrt(Var),
    Pow(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        weights: Vec<Var>,
        bias: Option<Var>,
        gathers: Vec<Vec<usize>>,
        geom: ConvGeometry,
        cols: Vec<Vec<f64>>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskChannels {
        x: Var,
        keep: Vec<bool>,
    },
    SoftmaxRows(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Probability floor inside the cross-entropy logarithm.
pub const CROSS_ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?} (only scalar broadcasting is supported)", ta.shape(), tb.shape()),
            ));
        };
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative argument {bad}"),
            });
        }
        let out = t.map(f64::sqrt);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Sqrt(a), rg))
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let t = self.value(a);
        if p.fract() != 0.0 {
            if let Some(bad) = t.data().iter().find(|&&x| x < 0.0) {
                return Err(Error::Domain {
                    op: "pow",
                    detail: format!("negative base {bad} with fractional exponent {p}"),
                });
            }
        }
        let out = t.map(|x| x.powf(p));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Pow(a, p), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        let out = t.map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Zeroes the listed channels of a `[B, C, ...]` tensor. The mask is a
    /// constant; gradients flow only through kept channels.
    pub fn mask_channels(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() < 2 || t.dim(1) != keep.len() {
            return Err(Error::shape(
                "mask_channels",
                format!("input {:?} vs mask of {} channels", t.shape(), keep.len()),
            ));
        }
        let inner: usize = t.shape()[2..].iter().product();
        let mut out = t.clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            if !keep[i % keep.len()] {
                chunk.fill(0.0);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskChannels { x, keep: keep.to_vec() }, rg))
    }

    // ---- layers ------------------------------------------------------

    /// `x·wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.ndim() != 2 || tw.ndim() != 2 || tx.dim(1) != tw.dim(1) {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (batch, inp, out_f) = (tx.dim(0), tx.dim(1), tw.dim(0));
        let mut out = vec![0.0; batch * out_f];
        conv::gemm(batch, inp, out_f, tx.data(), false, tw.data(), true, &mut out, 0.0);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [out_f] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs {} outputs", tb.shape(), out_f),
                ));
            }
            for row in out.chunks_mut(out_f) {
                for (v, bv) in row.iter_mut().zip(tb.data()) {
                    *v += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::new(vec![batch, out_f], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape_of(x).to_vec(), self.shape_of(w).to_vec());
        if ws.len() != 4 || xs.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} vs weight {ws:?}"),
            ));
        }
        let gather: Vec<usize> = (0..xs[1]).collect();
        self.conv_groups(x, &[w], &[gather], bias, stride, padding)
    }

    /// Grouped convolution with explicit input-channel gather lists. Gather
    /// lists of different groups may overlap; output channels are the
    /// concatenation of the per-group outputs in group order.
    pub fn grouped_conv2d(
        &mut self,
        x: Var,
        weights: &[Var],
        gathers: &[Vec<usize>],
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv_groups(x, weights, gathers, bias, stride, padding)
    }

    fn conv_groups(
        &mut self,
        x: Var,
        weights: &[Var],
        gathers: &[Vec<usize>],
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if weights.is_empty() || weights.len() != gathers.len() {
            return Err(Error::shape(
                "grouped_conv2d",
                format!("{} weight tensors for {} gather lists", weights.len(), gathers.len()),
            ));
        }
        let xs = self.shape_of(x).to_vec();
        let w0 = self.shape_of(weights[0]).to_vec();
        if w0.len() != 4 {
            return Err(Error::shape("grouped_conv2d", format!("weight {w0:?} is not 4-d")));
        }
        let geom = ConvGeometry::new(&xs, (w0[2], w0[3]), stride, padding)?;
        let mut filters = Vec::with_capacity(weights.len());
        for (gi, (&w, gather)) in weights.iter().zip(gathers).enumerate() {
            let ws = self.shape_of(w);
            if ws.len() != 4 || ws[2] != w0[2] || ws[3] != w0[3] || ws[1] != gather.len() {
                return Err(Error::shape(
                    "grouped_conv2d",
                    format!("group {gi}: weight {ws:?} vs gather list of {} channels", gather.len()),
                ));
            }
            if let Some(&bad) = gather.iter().find(|&&c| c >= xs[1]) {
                return Err(Error::Index {
                    op: "grouped_conv2d",
                    detail: format!("group {gi} gathers channel {bad} but input has {}", xs[1]),
                });
            }
            filters.push(ws[0]);
        }
        let out_channels: usize = filters.iter().sum();
        if let Some(b) = bias {
            if self.shape_of(b) != [out_channels] {
                return Err(Error::shape(
                    "grouped_conv2d",
                    format!("bias {:?} vs {} output channels", self.shape_of(b), out_channels),
                ));
            }
        }
        let mut inputs = vec![x];
        inputs.extend(weights);
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        let kernels: Vec<GroupKernel<'_>> = weights
            .iter()
            .zip(gathers)
            .zip(&filters)
            .map(|((&w, gather), &f)| GroupKernel {
                weight: self.nodes[w.0].value.data(),
                filters: f,
                gather,
            })
            .collect();
        let (out, cols) = conv::grouped_forward(
            self.nodes[x.0].value.data(),
            &geom,
            &kernels,
            bias.map(|b| self.nodes[b.0].value.data()),
            rg,
        );
        let value = Tensor::new(vec![geom.batch, out_channels, geom.out_h, geom.out_w], out)?;
        let op = Op::Conv {
            x,
            weights: weights.to_vec(),
            bias,
            gathers: gathers.to_vec(),
            geom,
            cols,
        };
        Ok(self.push(value, op, rg))
    }

    /// Max pooling without padding; ties go to the first element in scan order.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 4 || kernel == 0 || stride == 0 || t.dim(2) < kernel || t.dim(3) < kernel {
            return Err(Error::shape(
                "maxpool2d",
                format!("input {:?} with kernel {kernel}, stride {stride}", t.shape()),
            ));
        }
        let (b, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let mut out = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0u32; b * c * oh * ow];
        for (plane, src) in t.data().chunks_exact(h * w).enumerate() {
            let base = plane * h * w;
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            let arg = &mut argmax[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = oy * stride * w + ox * stride;
                    let mut best_v = src[best];
                    for ky in 0..kernel {
                        let row = &src[(oy * stride + ky) * w + ox * stride..][..kernel];
                        for (kx, &v) in row.iter().enumerate() {
                            if v > best_v {
                                best_v = v;
                                best = (oy * stride + ky) * w + ox * stride + kx;
                            }
                        }
                    }
                    dst[oy * ow + ox] = best_v;
                    arg[oy * ow + ox] = (base + best) as u32;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, c, oh, ow], out)?, Op::MaxPool { x, argmax }, rg))
    }

    fn check_bn(&self, x: Var, params: &[Var]) -> Result<(usize, usize, usize)> {
        let t = self.value(x);
        if t.ndim() != 4 {
            return Err(Error::shape("batchnorm2d", format!("input {:?} is not 4-d", t.shape())));
        }
        let c = t.dim(1);
        for &p in params {
            if self.shape_of(p) != [c] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("parameter {:?} vs {} channels", self.shape_of(p), c),
                ));
            }
        }
        Ok((t.dim(0), c, t.dim(2) * t.dim(3)))
    }

    /// Training-mode batchnorm: normalizes with the batch statistics and
    /// returns them so the caller can update running estimates.
    pub fn batchnorm2d_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, c, hw) = self.check_bn(x, &[gamma, beta])?;
        let data = self.value(x).data();
        let m = (b * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, s) in data.chunks_exact(hw).enumerate() {
            mean[i % c] += s.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for (i, s) in data.chunks_exact(hw).enumerate() {
            let mu = mean[i % c];
            var[i % c] += s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let unbiased: Vec<f64> = var.iter().map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 }).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, &mean, &inv_std, b, c, hw);
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::new(self.shape_of(x).to_vec(), out)?;
        let v = self.push(value, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, rg);
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batchnorm with fixed running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, hw) = self.check_bn(x, &[gamma, beta])?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm2d", "running statistics do not match channel count"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, b, c, hw);
        let rg = self.rg(&[x, gamma, beta]);
        let value = Tensor::new(self.shape_of(x).to_vec(), out)?;
        Ok(self.push(value, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, rg))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        b: usize,
        c: usize,
        hw: usize,
    ) -> (Vec<f64>, Vec<f64>) {
        let data = self.value(x).data();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        debug_assert_eq!(data.len(), b * c * hw);
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for (i, ((s, xh), o)) in data
            .chunks_exact(hw)
            .zip(xhat.chunks_exact_mut(hw))
            .zip(out.chunks_exact_mut(hw))
            .enumerate()
        {
            let ci = i % c;
            let (mu, is, gm, bt) = (mean[ci], inv_std[ci], g[ci], be[ci]);
            for ((&v, xv), ov) in s.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                let h = (v - mu) * is;
                *xv = h;
                *ov = gm * h + bt;
            }
        }
        (xhat, out)
    }

    /// Row-wise softmax of a `[rows, cols]` tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(Error::shape("softmax_rows", format!("input {:?} is not 2-d", t.shape())));
        }
        let cols = t.dim(1);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(t.shape().to_vec(), out)?, Op::SoftmaxRows(x), rg))
    }

    /// Mean softmax cross-entropy of `[B, classes]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.dim(0) != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs {} labels", t.shape(), labels.len()),
            ));
        }
        let classes = t.dim(1);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                detail: format!("label {bad} with {classes} classes"),
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(classes).zip(labels) {
            softmax_in_place(row);
            loss -= row[y].max(CROSS_ENTROPY_CLAMP).ln();
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Records a node whose value was computed by the caller and whose
    /// gradient comes from `op`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    // ---- backward ----------------------------------------------------

    /// Populates `grad` on every node that requires it and is reachable from
    /// `loss`. Gradients accumulate across paths.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.as_ref() else {
                continue;
            };
            let contributions = self.local_grads(idx, g);
            for (v, dg) in contributions {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.add_scaled(&dg, 1.0),
                    None => node.grad = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, reduce_to(val(*a), g.clone())));
                out.push((*b, reduce_to(val(*b), g.clone())));
            }
            Op::Sub(a, b) => {
                out.push((*a, reduce_to(val(*a), g.clone())));
                out.push((*b, reduce_to(val(*b), g.map(|x| -x))));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.needs(*a) {
                    out.push((*a, reduce_to(ta, broadcast_mul(g, tb))));
                }
                if self.needs(*b) {
                    out.push((*b, reduce_to(tb, broadcast_mul(g, ta))));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|x| c * x))),
            Op::Sum(a) => {
                let gv = g.item();
                out.push((*a, Tensor::full(val(*a).shape(), gv)));
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                let d = zip(g, y, |gi, yi| if yi > 0.0 { gi / (2.0 * yi) } else { 0.0 });
                out.push((*a, d));
            }
            Op::Pow(a, p) => {
                let x = val(*a);
                out.push((*a, zip(g, x, |gi, xi| gi * p * xi.powf(p - 1.0))));
            }
            Op::Exp(a) => out.push((*a, zip(g, &node.value, |gi, yi| gi * yi))),
            Op::Log(a) => out.push((*a, zip(g, val(*a), |gi, xi| gi / xi))),
            Op::Relu(a) => out.push((*a, zip(g, val(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 }))),
            Op::Reshape(a) => {
                let shape = val(*a).shape();
                out.push((*a, g.clone().reshape(shape).expect("reshape grad")));
            }
            Op::MaskChannels { x, keep } => {
                let inner: usize = g.shape()[2..].iter().product();
                let mut d = g.clone();
                for (i, chunk) in d.data_mut().chunks_mut(inner).enumerate() {
                    if !keep[i % keep.len()] {
                        chunk.fill(0.0);
                    }
                }
                out.push((*x, d));
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (batch, inp, outf) = (tx.dim(0), tx.dim(1), tw.dim(0));
                if self.needs(*x) {
                    let mut dx = vec![0.0; batch * inp];
                    conv::gemm(batch, outf, inp, g.data(), false, tw.data(), false, &mut dx, 0.0);
                    out.push((*x, Tensor::new(tx.shape().to_vec(), dx).unwrap()));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; outf * inp];
                    conv::gemm(outf, batch, inp, g.data(), true, tx.data(), false, &mut dw, 0.0);
                    out.push((*w, Tensor::new(tw.shape().to_vec(), dw).unwrap()));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; outf];
                    for row in g.data().chunks(outf) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((*b, Tensor::new(vec![outf], db).unwrap()));
                }
            }
            Op::Conv {
                x,
                weights,
                bias,
                gathers,
                geom,
                cols,
            } => {
                let filters: Vec<usize> = weights.iter().map(|w| val(*w).dim(0)).collect();
                let out_channels: usize = filters.iter().sum();
                let mut offset = 0;
                let mut dx = if self.needs(*x) {
                    Some(vec![0.0; val(*x).numel()])
                } else {
                    None
                };
                for (gi, &w) in weights.iter().enumerate() {
                    let rows = gathers[gi].len() * geom.kernel_area();
                    if self.needs(w) {
                        let dw = conv::group_weight_grad(
                            g.data(),
                            geom,
                            out_channels,
                            offset,
                            filters[gi],
                            rows,
                            &cols[gi],
                        );
                        out.push((w, Tensor::new(val(w).shape().to_vec(), dw).unwrap()));
                    }
                    if let Some(dx) = dx.as_mut() {
                        let kernel = GroupKernel {
                            weight: val(w).data(),
                            filters: filters[gi],
                            gather: &gathers[gi],
                        };
                        conv::group_input_grad_add(g.data(), geom, out_channels, offset, &kernel, dx);
                    }
                    offset += filters[gi];
                }
                if let Some(dx) = dx {
                    out.push((*x, Tensor::new(val(*x).shape().to_vec(), dx).unwrap()));
                }
                if let Some(b) = bias {
                    let plane = geom.out_plane();
                    let mut db = vec![0.0; out_channels];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        db[i % out_channels] += chunk.iter().sum::<f64>();
                    }
                    out.push((*b, Tensor::new(vec![out_channels], db).unwrap()));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let d = dx.data_mut();
                for (&i, &gi) in argmax.iter().zip(g.data()) {
                    d[i as usize] += gi;
                }
                out.push((*x, dx));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, hw) = bn_dims(val(*x));
                let m = (b * hw) as f64;
                let gam = val(*gamma).data();
                let (dgamma, dbeta) = bn_param_grads(g.data(), xhat, b, c, hw);
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.numel()];
                    for (i, ((d, gs), xh)) in dx
                        .chunks_exact_mut(hw)
                        .zip(g.data().chunks_exact(hw))
                        .zip(xhat.chunks_exact(hw))
                        .enumerate()
                    {
                        let ci = i % c;
                        // dxhat = g·γ; Σdxhat = γ·dβ; Σ dxhat·xhat = γ·dγ
                        let k = inv_std[ci] / m * gam[ci];
                        let (sb, sg) = (dbeta[ci], dgamma[ci]);
                        for ((dv, &gv), &xv) in d.iter_mut().zip(gs).zip(xh) {
                            *dv = k * (m * gv - sb - xv * sg);
                        }
                    }
                    out.push((*x, Tensor::new(val(*x).shape().to_vec(), dx).unwrap()));
                }
                out.push((*gamma, Tensor::new(vec![c], dgamma).unwrap()));
                out.push((*beta, Tensor::new(vec![c], dbeta).unwrap()));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, hw) = bn_dims(val(*x));
                let gam = val(*gamma).data();
                let (dgamma, dbeta) = bn_param_grads(g.data(), xhat, b, c, hw);
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(hw).enumerate() {
                        let ci = i % c;
                        chunk.iter_mut().for_each(|v| *v *= gam[ci] * inv_std[ci]);
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, Tensor::new(vec![c], dgamma).unwrap()));
                out.push((*beta, Tensor::new(vec![c], dbeta).unwrap()));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let cols = y.dim(1);
                let mut dx = vec![0.0; y.numel()];
                for ((dr, yr), gr) in dx.chunks_mut(cols).zip(y.data().chunks(cols)).zip(g.data().chunks(cols)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), dx).unwrap()));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let classes = val(*logits).dim(1);
                let scale = g.item() / labels.len() as f64;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(classes).zip(labels) {
                    if row[y] < CROSS_ENTROPY_CLAMP {
                        row.fill(0.0);
                        continue;
                    }
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*logits, Tensor::new(val(*logits).shape().to_vec(), d).unwrap()));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                for (v, d) in inputs.iter().zip(op.backward(&vals, g)) {
                    if let Some(d) = d {
                        debug_assert_eq!(d.shape(), val(*v).shape(), "custom op {} grad shape", op.name());
                        out.push((*v, d));
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    if other.numel() == 1 && g.numel() != 1 {
        let c = other.data()[0];
        g.map(|x| x * c)
    } else if g.numel() == 1 && other.numel() != 1 {
        let c = g.data()[0];
        other.map(|x| x * c)
    } else {
        zip(g, other, |a, b| a * b)
    }
}

/// Sums a broadcast gradient back down to a scalar operand.
fn reduce_to(target: &Tensor, g: Tensor) -> Tensor {
    if target.shape() == g.shape() {
        g
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

fn bn_dims(t: &Tensor) -> (usize, usize, usize) {
    (t.dim(0), t.dim(1), t.dim(2) * t.dim(3))
}

fn bn_param_grads(g: &[f64], xhat: &[f64], _b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (i, (gs, xh)) in g.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
        let (mut sg, mut sb) = (0.0, 0.0);
        for (&gv, &xv) in gs.iter().zip(xh) {
            sg += gv * xv;
            sb += gv;
        }
        dgamma[i % c] += sg;
        dbeta[i % c] += sb;
    }
    (dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln10() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 10]));
        let l = tape.softmax_cross_entropy(x, &[3, 7]).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_of_constant_input_is_zero_before_affine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 2, 2], 4.5));
        let gamma = tape.constant(Tensor::ones(&[3]));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = tape.batchnorm2d_train(x, gamma, beta, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
        assert_eq!(stats.mean, vec![4.5; 3]);
        assert_eq!(stats.var, vec![0.0; 3]);
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(tape.grad(w).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn domain_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.sqrt(x), Err(Error::Domain { op: "sqrt", .. })));
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(tape.pow(x, 0.5), Err(Error::Domain { .. })));
        assert!(tape.pow(x, 2.0).is_ok());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        let x = tape.constant(Tensor::ones(&[1, 2, 5, 5]));
        let w = tape.constant(Tensor::ones(&[4, 3, 3, 3]));
        let msg = tape.conv2d(x, w, None, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[4, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn shared_input_accumulates() {
        // y = x·x + 3x at x = 2 → dy/dx = 2x + 3 = 7
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0);
        let y = tape.add(sq, lin).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn unreachable_params_get_no_grad() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[2]));
        let b = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).is_some());
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
