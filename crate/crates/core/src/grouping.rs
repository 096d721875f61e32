//! Differentiable filter-group learning.
//!
//! Each grouped convolution owns positive logits `π` of shape `[C_out, N]`.
//! A relaxed assignment `α = softmax((log π + g) / τ)` with Gumbel noise `g`
//! weights a group-channel regularizer
//!
//! ```text
//! R = Σ_p s_p · Σ_m sqrt(Σ_k α_kp² ‖W_km‖²),     s_p = (Σ_k √α_kp)²
//! ```
//!
//! where `s_p` is the L½ quasi-norm of column `p` of `α` (an alternate reading,
//! `Σ_k √α_kp`, is available through [`NormVariant`]). Weights follow SGD on
//! `L + λR`; the logits follow Adam on the gradient of `L(W′) + λR(W′, α)`
//! where `W′` is one unrolled SGD step. All derivatives of `R` are closed form,
//! including the mixed second derivative needed by the unrolled step.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{epoch_order, Split};
use crate::error::{Error, Result};
use crate::model::{ConvLayerSpec, Network};
use crate::optim::{Adam, Sgd};
use crate::tensor::{CustomOp, Tape, Tensor, Var};
use crate::train::{accuracy, decayed_lr, loss_and_grads, minibatches};

/// How the column weight `s_p` of the regularizer is computed from `α_{:,p}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormVariant {
    /// `(Σ_k √α_kp)²`, the L½ quasi-norm.
    #[default]
    QuasiNorm,
    /// `Σ_k √α_kp`.
    SumSqrt,
}

impl NormVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "quasi-norm" | "quasinorm" => Ok(NormVariant::QuasiNorm),
            "sum-sqrt" | "sumsqrt" => Ok(NormVariant::SumSqrt),
            other => Err(Error::Config(format!("unknown norm variant {other:?} (quasi-norm | sum-sqrt)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormVariant::QuasiNorm => "quasi-norm",
            NormVariant::SumSqrt => "sum-sqrt",
        }
    }

    /// `s_p` and `∂s_p/∂α_kp` for one column.
    fn weight_and_grad(self, column: &[f64]) -> (f64, Vec<f64>) {
        let roots: Vec<f64> = column.iter().map(|a| a.max(0.0).sqrt()).collect();
        let s: f64 = roots.iter().sum();
        // The derivative blows up at α = 0; relaxed samples are strictly
        // positive, and an underflowed entry contributes no gradient.
        let inv = |r: f64| if r > 0.0 { 1.0 / r } else { 0.0 };
        match self {
            NormVariant::QuasiNorm => (s * s, roots.iter().map(|&r| s * inv(r)).collect()),
            NormVariant::SumSqrt => (s, roots.iter().map(|&r| 0.5 * inv(r)).collect()),
        }
    }
}

/// Default floor that keeps logits strictly positive after each Adam step.
pub const PI_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupLearnConfig {
    /// Regularization strength λ.
    pub lambda: f64,
    pub tau: f64,
    pub groups: usize,
    /// Step size of the unrolled update. `None` uses the current weight rate.
    pub unroll_lr: Option<f64>,
    /// Adam rate for the logits.
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    /// Initial momentum-SGD rate for the weights.
    pub weight_lr: f64,
    pub momentum: f64,
    /// Per-epoch multiplicative decay of the weight rate.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub norm: NormVariant,
    pub pi_floor: f64,
    /// Draw the Gumbel noise once and reuse it for every step.
    pub freeze_noise: bool,
}

impl Default for GroupLearnConfig {
    fn default() -> Self {
        GroupLearnConfig {
            lambda: 1e-3,
            tau: 0.5,
            groups: 2,
            unroll_lr: None,
            alpha_lr: 1e-3,
            alpha_betas: (0.9, 0.999),
            weight_lr: 0.1,
            momentum: 0.9,
            lr_decay: 0.9,
            epochs: 40,
            batch_size: 128,
            seed: 0,
            norm: NormVariant::QuasiNorm,
            pi_floor: PI_FLOOR,
            freeze_noise: false,
        }
    }
}

impl GroupLearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.groups == 0 {
            return bad("groups must be at least 1".into());
        }
        for (name, v) in [("alpha_lr", self.alpha_lr), ("weight_lr", self.weight_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if let Some(e) = self.unroll_lr {
            if !(e >= 0.0 && e.is_finite()) {
                return bad(format!("unroll_lr must be >= 0, got {e}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.pi_floor > 0.0) {
            return bad("pi_floor must be > 0".into());
        }
        Ok(())
    }
}

/// Per-layer regularizer multiplier `λ_i / λ = sqrt(C_out · K_h · K_w)`.
pub fn layer_scale(spec: &ConvLayerSpec) -> f64 {
    ((spec.out_channels * spec.kernel.0 * spec.kernel.1) as f64).sqrt()
}

/// Group logits of one grouped layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGroups {
    pub layer: usize,
    /// `[C_out, N]`, strictly positive.
    pub pi: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupParameters {
    pub layers: Vec<LayerGroups>,
    pub tau: f64,
    pub groups: usize,
}

impl GroupParameters {
    /// All-ones logits for every grouped layer of `net`.
    pub fn uniform(net: &Network, groups: usize, tau: f64) -> Result<Self> {
        if groups == 0 {
            return Err(Error::Config("groups must be at least 1".into()));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {tau}")));
        }
        let layers = net
            .spec
            .grouped_layers()
            .into_iter()
            .map(|layer| LayerGroups {
                layer,
                pi: Tensor::ones(&[net.spec.conv(layer).unwrap().out_channels, groups]),
            })
            .collect();
        Ok(GroupParameters { layers, tau, groups })
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerGroups> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    fn check(&self) -> Result<()> {
        for l in &self.layers {
            if let Some(bad) = l.pi.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::Domain {
                    op: "sample_alpha",
                    detail: format!("layer {} has non-positive logit {bad}", l.layer),
                });
            }
        }
        Ok(())
    }

    /// `softmax(log π)` per row: the noise-free assignment probabilities.
    pub fn probabilities(&self) -> Vec<Tensor> {
        self.layers.iter().map(|l| relaxed(&l.pi, &Tensor::zeros(l.pi.shape()), 1.0)).collect()
    }

    /// Mean row entropy (nats) of the assignment probabilities, per layer.
    pub fn entropies(&self) -> Vec<f64> {
        self.probabilities()
            .iter()
            .map(|p| {
                let rows = p.dim(0).max(1);
                let h: f64 = p.data().iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
                h / rows as f64
            })
            .collect()
    }

    /// Mean over rows of the largest assignment probability, per layer.
    pub fn concentration(&self) -> Vec<f64> {
        self.probabilities()
            .iter()
            .map(|p| {
                let n = p.dim(1);
                let rows: Vec<f64> = p.data().chunks(n).map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
                rows.iter().sum::<f64>() / rows.len().max(1) as f64
            })
            .collect()
    }
}

/// Relaxed assignment of one grouped layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAlpha {
    pub layer: usize,
    /// `[C_out, N]`, rows summing to one.
    pub alpha: Tensor,
    /// Gumbel draws that produced `alpha`.
    pub gumbel: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSample {
    pub layers: Vec<LayerAlpha>,
}

impl AlphaSample {
    pub fn layer(&self, layer: usize) -> Option<&LayerAlpha> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Relaxation of `params` under fixed noise (one tensor per layer).
    pub fn from_noise(params: &GroupParameters, noise: &[Tensor]) -> Result<Self> {
        params.check()?;
        if noise.len() != params.layers.len() {
            return Err(Error::Contract(format!(
                "{} noise tensors for {} grouped layers",
                noise.len(),
                params.layers.len()
            )));
        }
        let layers = params
            .layers
            .iter()
            .zip(noise)
            .map(|(l, g)| {
                if g.shape() != l.pi.shape() {
                    return Err(Error::shape(
                        "sample_alpha",
                        format!("noise {:?} vs logits {:?}", g.shape(), l.pi.shape()),
                    ));
                }
                Ok(LayerAlpha {
                    layer: l.layer,
                    alpha: relaxed(&l.pi, g, params.tau),
                    gumbel: g.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(AlphaSample { layers })
    }
}

/// Standard Gumbel draws `-ln(-ln u)` with `u` uniform on the open interval.
pub fn gumbel_noise(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let u: f64 = loop {
            let u: f64 = rng.gen();
            if u > 0.0 {
                break u;
            }
        };
        -(-u.ln()).ln()
    })
}

/// Draws fresh noise and relaxes every layer's logits.
pub fn sample_alpha(params: &GroupParameters, rng: &mut impl Rng) -> Result<AlphaSample> {
    params.check()?;
    let noise: Vec<Tensor> = params.layers.iter().map(|l| gumbel_noise(l.pi.shape(), rng)).collect();
    AlphaSample::from_noise(params, &noise)
}

/// `softmax((log π + g) / τ)` row by row.
fn relaxed(pi: &Tensor, g: &Tensor, tau: f64) -> Tensor {
    let n = pi.dim(1);
    let mut z: Vec<f64> = pi.data().iter().zip(g.data()).map(|(p, g)| (p.ln() + g) / tau).collect();
    for row in z.chunks_mut(n) {
        crate::tensor::softmax_in_place(row);
    }
    Tensor::new(pi.shape().to_vec(), z).unwrap()
}

/// Records the relaxation on a tape so gradients flow back to `pi`.
pub fn alpha_on_tape(tape: &mut Tape, pi: Var, gumbel: &Tensor, tau: f64) -> Result<Var> {
    let logp = tape.log(pi)?;
    let g = tape.constant(gumbel.clone());
    let z = tape.add(logp, g)?;
    let z = tape.scale(z, 1.0 / tau);
    tape.softmax_rows(z)
}

/// Chains `∂F/∂α` back to the logits through the relaxation in closed form:
/// `∂F/∂π_kj = α_kj (G_kj − Σ_p α_kp G_kp) / (τ π_kj)`.
pub fn chain_to_pi(pi: &Tensor, alpha: &Tensor, d_alpha: &Tensor, tau: f64) -> Tensor {
    let n = pi.dim(1);
    let mut out = vec![0.0; pi.numel()];
    for (k, row) in out.chunks_mut(n).enumerate() {
        let a = &alpha.data()[k * n..(k + 1) * n];
        let g = &d_alpha.data()[k * n..(k + 1) * n];
        let p = &pi.data()[k * n..(k + 1) * n];
        let mean: f64 = a.iter().zip(g).map(|(a, g)| a * g).sum();
        for j in 0..n {
            row[j] = a[j] * (g[j] - mean) / (tau * p[j]);
        }
    }
    Tensor::new(pi.shape().to_vec(), out).unwrap()
}

// ---- regularizer ------------------------------------------------------

/// Dimensions of a `[C_out, C_in, K_h, K_w]` weight and its `[C_out, N]`
/// assignment, checked for agreement.
struct Dims {
    cout: usize,
    cin: usize,
    area: usize,
    n: usize,
}

fn dims(w: &Tensor, alpha: &Tensor) -> Result<Dims> {
    if w.ndim() != 4 || alpha.ndim() != 2 || w.dim(0) != alpha.dim(0) {
        return Err(Error::shape(
            "group_regularizer",
            format!("weight {:?} vs alpha {:?}", w.shape(), alpha.shape()),
        ));
    }
    Ok(Dims {
        cout: w.dim(0),
        cin: w.dim(1),
        area: w.dim(2) * w.dim(3),
        n: alpha.dim(1),
    })
}

/// `q_km = ‖W_km‖²` for every filter `k` and input channel `m`.
fn channel_energy(w: &Tensor, d: &Dims) -> Vec<f64> {
    w.data().chunks(d.area).map(|s| s.iter().map(|v| v * v).sum()).collect()
}

/// Column weights `s_p` and their derivatives `∂s_p/∂α_kp` (stored `[k, p]`).
fn column_weights(alpha: &Tensor, d: &Dims, norm: NormVariant) -> (Vec<f64>, Vec<f64>) {
    let mut s = vec![0.0; d.n];
    let mut ds = vec![0.0; d.cout * d.n];
    for (p, sp) in s.iter_mut().enumerate() {
        let column: Vec<f64> = (0..d.cout).map(|k| alpha.data()[k * d.n + p]).collect();
        let (v, grad) = norm.weight_and_grad(&column);
        *sp = v;
        for (k, g) in grad.into_iter().enumerate() {
            ds[k * d.n + p] = g;
        }
    }
    (s, ds)
}

/// `n_pm = sqrt(Σ_k α_kp² q_km)`, stored `[p, m]`.
fn group_channel_norms(alpha: &Tensor, q: &[f64], d: &Dims) -> Vec<f64> {
    let a = alpha.data();
    let mut norms = vec![0.0; d.n * d.cin];
    for p in 0..d.n {
        for m in 0..d.cin {
            let mut acc = 0.0;
            for k in 0..d.cout {
                let akp = a[k * d.n + p];
                acc += akp * akp * q[k * d.cin + m];
            }
            norms[p * d.cin + m] = acc.sqrt();
        }
    }
    norms
}

/// Unscaled regularizer of one layer.
pub fn layer_regularizer(w: &Tensor, alpha: &Tensor, norm: NormVariant) -> Result<f64> {
    let d = dims(w, alpha)?;
    let q = channel_energy(w, &d);
    let (s, _) = column_weights(alpha, &d, norm);
    let norms = group_channel_norms(alpha, &q, &d);
    Ok((0..d.n).map(|p| s[p] * norms[p * d.cin..(p + 1) * d.cin].iter().sum::<f64>()).sum())
}

/// `∂R/∂W` of one layer (unscaled). Zero where a group channel norm is zero.
pub fn layer_regularizer_grad_w(w: &Tensor, alpha: &Tensor, norm: NormVariant) -> Result<Tensor> {
    let d = dims(w, alpha)?;
    let q = channel_energy(w, &d);
    let (s, _) = column_weights(alpha, &d, norm);
    let norms = group_channel_norms(alpha, &q, &d);
    let a = alpha.data();
    // coefficient per (k, m): Σ_p s_p α_kp² / n_pm
    let mut coef = vec![0.0; d.cout * d.cin];
    for p in 0..d.n {
        for m in 0..d.cin {
            let npm = norms[p * d.cin + m];
            if npm == 0.0 {
                continue;
            }
            for k in 0..d.cout {
                let akp = a[k * d.n + p];
                coef[k * d.cin + m] += s[p] * akp * akp / npm;
            }
        }
    }
    let mut grad = w.clone();
    for (slice, c) in grad.data_mut().chunks_mut(d.area).zip(&coef) {
        slice.iter_mut().for_each(|v| *v *= c);
    }
    Ok(grad)
}

/// `∂R/∂α` of one layer (unscaled), shape `[C_out, N]`.
pub fn layer_regularizer_grad_alpha(w: &Tensor, alpha: &Tensor, norm: NormVariant) -> Result<Tensor> {
    let d = dims(w, alpha)?;
    let q = channel_energy(w, &d);
    let (s, ds) = column_weights(alpha, &d, norm);
    let norms = group_channel_norms(alpha, &q, &d);
    let a = alpha.data();
    let mut out = vec![0.0; d.cout * d.n];
    for p in 0..d.n {
        let row = &norms[p * d.cin..(p + 1) * d.cin];
        let total: f64 = row.iter().sum();
        for k in 0..d.cout {
            let akp = a[k * d.n + p];
            let mut inner = 0.0;
            for (m, &npm) in row.iter().enumerate() {
                if npm > 0.0 {
                    inner += akp * q[k * d.cin + m] / npm;
                }
            }
            out[k * d.n + p] = ds[k * d.n + p] * total + s[p] * inner;
        }
    }
    Tensor::new(vec![d.cout, d.n], out)
}

/// Mixed second derivative applied to a direction: `∂/∂α ⟨∂R/∂W, v⟩` for
/// one layer (unscaled), shape `[C_out, N]`.
///
/// With `c_km = ⟨W_km, v_km⟩` and `A_pm = Σ_k α_kp² c_km`, the inner product
/// is `h = Σ_p s_p Σ_m A_pm / n_pm`, whose derivative is
/// `∂s_p/∂α_kp · Σ_m A_pm/n_pm + s_p Σ_m (2 α_kp c_km / n_pm − A_pm α_kp q_km / n_pm³)`.
pub fn layer_regularizer_mixed(w: &Tensor, alpha: &Tensor, v: &Tensor, norm: NormVariant) -> Result<Tensor> {
    let d = dims(w, alpha)?;
    if v.shape() != w.shape() {
        return Err(Error::shape(
            "regularizer_mixed",
            format!("direction {:?} vs weight {:?}", v.shape(), w.shape()),
        ));
    }
    let q = channel_energy(w, &d);
    let c: Vec<f64> = w
        .data()
        .chunks(d.area)
        .zip(v.data().chunks(d.area))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum())
        .collect();
    let (s, ds) = column_weights(alpha, &d, norm);
    let norms = group_channel_norms(alpha, &q, &d);
    let a = alpha.data();
    let mut out = vec![0.0; d.cout * d.n];
    for p in 0..d.n {
        let big_a: Vec<f64> = (0..d.cin)
            .map(|m| (0..d.cout).map(|k| a[k * d.n + p] * a[k * d.n + p] * c[k * d.cin + m]).sum())
            .collect();
        let h_p: f64 = (0..d.cin)
            .filter(|&m| norms[p * d.cin + m] > 0.0)
            .map(|m| big_a[m] / norms[p * d.cin + m])
            .sum();
        for k in 0..d.cout {
            let akp = a[k * d.n + p];
            let mut inner = 0.0;
            for m in 0..d.cin {
                let npm = norms[p * d.cin + m];
                if npm > 0.0 {
                    inner += 2.0 * akp * c[k * d.cin + m] / npm - big_a[m] * akp * q[k * d.cin + m] / (npm * npm * npm);
                }
            }
            out[k * d.n + p] = ds[k * d.n + p] * h_p + s[p] * inner;
        }
    }
    Tensor::new(vec![d.cout, d.n], out)
}

struct RegularizerOp {
    norm: NormVariant,
}

impl CustomOp for RegularizerOp {
    fn name(&self) -> &'static str {
        "group_regularizer"
    }

    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad_out.item();
        let (w, alpha) = (inputs[0], inputs[1]);
        let gw = layer_regularizer_grad_w(w, alpha, self.norm).expect("shapes checked in forward");
        let ga = layer_regularizer_grad_alpha(w, alpha, self.norm).expect("shapes checked in forward");
        vec![Some(gw.map(|v| v * g)), Some(ga.map(|v| v * g))]
    }
}

/// One layer's regularizer recorded on a tape, differentiable with respect
/// to both the weight and the assignment.
pub fn regularizer_on_tape(tape: &mut Tape, w: Var, alpha: Var, norm: NormVariant) -> Result<Var> {
    let value = layer_regularizer(tape.value(w), tape.value(alpha), norm)?;
    Ok(tape.custom(&[w, alpha], Tensor::scalar(value), Box::new(RegularizerOp { norm })))
}

/// `Σ_i (λ_i/λ) R_i` over the grouped layers of `net` (λ not applied).
pub fn group_regularizer(net: &Network, alpha: &AlphaSample, norm: NormVariant) -> Result<f64> {
    let mut total = 0.0;
    for l in &alpha.layers {
        let (spec, w) = grouped_layer(net, l.layer)?;
        total += layer_scale(spec) * layer_regularizer(w, &l.alpha, norm)?;
    }
    Ok(total)
}

fn grouped_layer(net: &Network, layer: usize) -> Result<(&ConvLayerSpec, &Tensor)> {
    match (net.spec.conv(layer), net.conv_weight(layer)) {
        (Some(s), Some(w)) => Ok((s, w)),
        _ => Err(Error::Contract(format!("layer {layer} is not a convolution"))),
    }
}

// ---- unrolled step ------------------------------------------------------

/// Adds `λ ∂R/∂W` to the loss gradients of the grouped weights. `grads` is in
/// [`Network::trainable`] order.
fn add_regularizer_grads(
    net: &Network,
    alpha: &AlphaSample,
    lambda: f64,
    norm: NormVariant,
    grads: &mut [Tensor],
) -> Result<()> {
    if lambda == 0.0 {
        return Ok(());
    }
    let offsets = net.trainable_offsets();
    for l in &alpha.layers {
        let (spec, w) = grouped_layer(net, l.layer)?;
        let gr = layer_regularizer_grad_w(w, &l.alpha, norm)?;
        grads[offsets[l.layer]].add_scaled(&gr, lambda * layer_scale(spec));
    }
    Ok(())
}

/// `∇_W (L + λR)` at the current weights: loss gradients plus the
/// regularizer term on grouped layers.
pub fn total_gradient(
    net: &Network,
    alpha: &AlphaSample,
    config: &GroupLearnConfig,
    loss_grads: &[Tensor],
) -> Result<Vec<Tensor>> {
    let mut grads = loss_grads.to_vec();
    add_regularizer_grads(net, alpha, config.lambda, config.norm, &mut grads)?;
    Ok(grads)
}

fn apply_step(net: &Network, grads: &[Tensor], eps: f64) -> Network {
    let mut adapted = net.clone();
    if eps != 0.0 {
        for (p, g) in adapted.trainable_mut().into_iter().zip(grads) {
            p.add_scaled(g, -eps);
        }
    }
    adapted
}

fn full_grads(lg: crate::train::LossGrads) -> Vec<Tensor> {
    lg.grads.into_iter().map(|g| g.expect("all layers differentiated")).collect()
}

/// `W′ = W − ε∇L(W) − ελ∇R(W, α)` on the batch `(x, y)`; `net` is untouched.
pub fn one_step_adapt(
    net: &Network,
    alpha: &AlphaSample,
    config: &GroupLearnConfig,
    x: &Tensor,
    y: &[usize],
    eps: f64,
) -> Result<Network> {
    let lg = loss_and_grads(net, x, y, None, 0)?;
    let grads = total_gradient(net, alpha, config, &full_grads(lg))?;
    Ok(apply_step(net, &grads, eps))
}

/// Gradients of the unrolled objective for every grouped layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaGradient {
    /// With respect to the relaxed assignment, `[C_out, N]` per layer.
    pub d_alpha: Vec<Tensor>,
    /// Chained to the logits, `[C_out, N]` per layer.
    pub d_pi: Vec<Tensor>,
    /// `L(W′)` on the batch.
    pub outer_loss: f64,
}

/// Gradient of `L(W′) + λR(W′, α)` with respect to `α` and `π`, where `W′`
/// is the one-step adaptation. `loss_grads` are `∇L(W)` on the same batch.
fn alpha_gradient_from(
    net: &Network,
    params: &GroupParameters,
    alpha: &AlphaSample,
    config: &GroupLearnConfig,
    x: &Tensor,
    y: &[usize],
    eps: f64,
    loss_grads: &[Tensor],
) -> Result<(AlphaGradient, Vec<Tensor>)> {
    let grads = total_gradient(net, alpha, config, loss_grads)?;
    let lambda = config.lambda;
    let mut d_alpha = Vec::with_capacity(alpha.layers.len());
    let mut outer_loss = f64::NAN;
    if lambda == 0.0 {
        for l in &alpha.layers {
            d_alpha.push(Tensor::zeros(l.alpha.shape()));
        }
    } else if eps == 0.0 {
        for l in &alpha.layers {
            let (spec, w) = grouped_layer(net, l.layer)?;
            let ga = layer_regularizer_grad_alpha(w, &l.alpha, config.norm)?;
            d_alpha.push(ga.map(|v| v * lambda * layer_scale(spec)));
        }
    } else {
        let adapted = apply_step(net, &grads, eps);
        let first = alpha.layers.iter().map(|l| l.layer).min().unwrap_or(0);
        let lg = loss_and_grads(&adapted, x, y, None, first)?;
        outer_loss = lg.loss;
        let offsets = net.trainable_offsets();
        for l in &alpha.layers {
            let (spec, w) = grouped_layer(net, l.layer)?;
            let w_adapted = adapted.conv_weight(l.layer).unwrap();
            let scale = lambda * layer_scale(spec);
            // v = ∇_{W′}(L + λR) for this layer
            let mut v = lg.grads[offsets[l.layer]].clone().expect("grouped layer differentiated");
            v.add_scaled(&layer_regularizer_grad_w(w_adapted, &l.alpha, config.norm)?, scale);
            let mut ga = layer_regularizer_grad_alpha(w_adapted, &l.alpha, config.norm)?;
            let mixed = layer_regularizer_mixed(w, &l.alpha, &v, config.norm)?;
            ga.add_scaled(&mixed, -eps);
            d_alpha.push(ga.map(|g| g * scale));
        }
    }
    let d_pi = params
        .layers
        .iter()
        .zip(&alpha.layers)
        .zip(&d_alpha)
        .map(|((p, a), g)| chain_to_pi(&p.pi, &a.alpha, g, params.tau))
        .collect();
    Ok((AlphaGradient { d_alpha, d_pi, outer_loss }, grads))
}

/// Gradient of the unrolled objective `L(W′) + λR(W′, α)` with respect to the
/// assignment and the logits, `W′` being [`one_step_adapt`] with rate `eps`.
pub fn alpha_gradient(
    net: &Network,
    params: &GroupParameters,
    alpha: &AlphaSample,
    config: &GroupLearnConfig,
    x: &Tensor,
    y: &[usize],
    eps: f64,
) -> Result<AlphaGradient> {
    let lg = loss_and_grads(net, x, y, None, 0)?;
    Ok(alpha_gradient_from(net, params, alpha, config, x, y, eps, &full_grads(lg))?.0)
}

// ---- training loop ------------------------------------------------------

/// One row of the per-epoch metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Mean scaled regularizer `Σ_i (λ_i/λ) R_i` over the epoch.
    pub regularizer: f64,
    /// Mean row entropy of `softmax(log π)` per grouped layer.
    pub entropy: Vec<f64>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

/// Where each step's assignment comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaSource {
    /// Gumbel-softmax samples of learned logits.
    Learned,
    /// Every entry is one and the logits never move; with `N = 1` this is
    /// plain input-channel group lasso.
    FixedOnes,
}

/// Learns weights and group logits jointly. Noise uses its own random
/// stream, separate from the data order, so the two never interact.
pub fn group_learning_phase(
    net: &mut Network,
    train: &Split,
    validation: Option<&Split>,
    config: &GroupLearnConfig,
    source: AlphaSource,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(GroupParameters, Vec<EpochMetrics>)> {
    config.validate()?;
    let mut params = GroupParameters::uniform(net, config.groups, config.tau)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
    noise_rng.set_stream(1);
    let frozen = match (config.freeze_noise, source) {
        (true, AlphaSource::Learned) => Some(
            params
                .layers
                .iter()
                .map(|l| gumbel_noise(l.pi.shape(), &mut noise_rng))
                .collect::<Vec<_>>(),
        ),
        _ => None,
    };
    let mut sgd = Sgd::new(config.weight_lr, config.momentum);
    let (b1, b2) = config.alpha_betas;
    let mut adam = Adam::new(config.alpha_lr, b1, b2);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = std::time::Instant::now();
        let lr = decayed_lr(config.weight_lr, config.lr_decay, epoch);
        sgd.lr = lr;
        let eps = config.unroll_lr.unwrap_or(lr);
        let order = epoch_order(train.len(), config.seed, epoch);
        let (mut loss_sum, mut reg_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch in minibatches(&order, config.batch_size) {
            let (x, y) = train.batch(batch);
            let alpha = match (source, &frozen) {
                (AlphaSource::FixedOnes, _) => ones_sample(&params),
                (AlphaSource::Learned, Some(noise)) => AlphaSample::from_noise(&params, noise)?,
                (AlphaSource::Learned, None) => sample_alpha(&params, &mut noise_rng)?,
            };
            let lg = loss_and_grads(net, &x, &y, None, 0)?;
            let loss = lg.loss;
            net.update_running_stats(&lg.batch_stats);
            let loss_grads = full_grads(lg);
            let grads = match source {
                AlphaSource::Learned => {
                    let (ag, grads) =
                        alpha_gradient_from(net, &params, &alpha, config, &x, &y, eps, &loss_grads)?;
                    if ag.d_pi.iter().any(|g| !g.all_finite()) {
                        return Err(Error::Divergence(format!("non-finite logit gradient in epoch {epoch}")));
                    }
                    let pis: Vec<&mut Tensor> = params.layers.iter_mut().map(|l| &mut l.pi).collect();
                    adam.step(pis, &ag.d_pi);
                    for l in &mut params.layers {
                        l.pi.data_mut().iter_mut().for_each(|v| *v = v.max(config.pi_floor));
                    }
                    grads
                }
                AlphaSource::FixedOnes => total_gradient(net, &alpha, config, &loss_grads)?,
            };
            reg_sum += group_regularizer(net, &alpha, config.norm)?;
            sgd.step(net.trainable_mut(), &grads);
            loss_sum += loss;
            steps += 1;
        }
        let val_accuracy = validation.map(|v| accuracy(net, v, None)).transpose()?;
        let row = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / steps.max(1) as f64,
            regularizer: reg_sum / steps.max(1) as f64,
            entropy: params.entropies(),
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        if !row.loss.is_finite() {
            return Err(Error::Divergence(format!("mean loss {} in epoch {epoch}", row.loss)));
        }
        on_epoch(&row);
        history.push(row);
    }
    Ok((params, history))
}

/// Assignment with every entry equal to one.
pub fn ones_sample(params: &GroupParameters) -> AlphaSample {
    AlphaSample {
        layers: params
            .layers
            .iter()
            .map(|l| LayerAlpha {
                layer: l.layer,
                alpha: Tensor::ones(l.pi.shape()),
                gumbel: Tensor::zeros(l.pi.shape()),
            })
            .collect(),
    }
}
