//! Declarative network specifications, weights, and forward passes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
    /// Filters of this layer are partitioned into learned groups.
    pub grouped: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvLayerSpec),
    BatchNorm { channels: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Linear { in_features: usize, out_features: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    /// `[channels, height, width]` of one input sample.
    pub input_shape: [usize; 3],
}

/// Parameter, FLOP and multiply-accumulate totals. FLOPs are two per MAC.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
    pub macs: u64,
}

impl Cost {
    /// Percentage reduction of `self` relative to `dense`, rounded to two decimals.
    pub fn reduction_vs(&self, dense: &Cost) -> (f64, f64) {
        (pct_drop(self.params, dense.params), pct_drop(self.flops, dense.flops))
    }
}

fn pct_drop(now: u64, base: u64) -> f64 {
    if base == 0 {
        return 0.0;
    }
    let raw = 100.0 * (base as f64 - now as f64) / base as f64;
    (raw * 100.0).round() / 100.0
}

/// The two-conv MNIST toy network. Each convolution outputs 8 channels and
/// is followed by batchnorm, ReLU and 2×2 max pooling; a linear layer maps
/// the pooled features to 10 classes. The second convolution is grouped.
pub fn build_toy_net() -> NetworkSpec {
    let conv = |in_channels, grouped| {
        LayerSpec::Conv(ConvLayerSpec {
            out_channels: 8,
            in_channels,
            kernel: (3, 3),
            stride: 1,
            padding: 1,
            has_bias: false,
            grouped,
        })
    };
    NetworkSpec {
        layers: vec![
            conv(1, false),
            LayerSpec::BatchNorm { channels: 8 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            conv(8, true),
            LayerSpec::BatchNorm { channels: 8 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 8 * 7 * 7,
                out_features: 10,
            },
        ],
        classes: 10,
        input_shape: [1, 28, 28],
    }
}

/// Activation shape after a layer, per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Map { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl NetworkSpec {
    /// Checks that adjacent layers compose and returns the per-sample output
    /// shape of every layer.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input_shape;
        let mut cur = ActShape::Map { channels: c, height: h, width: w };
        let mut out = Vec::with_capacity(self.layers.len());
        let bad = |i: usize, msg: String| Error::shape("network", format!("layer {i}: {msg}"));
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (layer, cur) {
                (LayerSpec::Conv(s), ActShape::Map { channels, height, width }) => {
                    if s.in_channels != channels {
                        return Err(bad(i, format!("conv expects {} input channels, got {channels}", s.in_channels)));
                    }
                    if s.out_channels == 0 || s.in_channels == 0 || s.kernel.0 == 0 || s.kernel.1 == 0 || s.stride == 0 {
                        return Err(bad(i, "conv extents must be positive".into()));
                    }
                    if height + 2 * s.padding < s.kernel.0 || width + 2 * s.padding < s.kernel.1 {
                        return Err(bad(i, "kernel larger than padded input".into()));
                    }
                    ActShape::Map {
                        channels: s.out_channels,
                        height: (height + 2 * s.padding - s.kernel.0) / s.stride + 1,
                        width: (width + 2 * s.padding - s.kernel.1) / s.stride + 1,
                    }
                }
                (LayerSpec::BatchNorm { channels: bc }, m @ ActShape::Map { channels, .. }) => {
                    if *bc != channels {
                        return Err(bad(i, format!("batchnorm over {bc} channels after {channels}")));
                    }
                    m
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::MaxPool { kernel, stride }, ActShape::Map { channels, height, width }) => {
                    if *kernel == 0 || *stride == 0 || height < *kernel || width < *kernel {
                        return Err(bad(i, "pooling window does not fit".into()));
                    }
                    ActShape::Map {
                        channels,
                        height: (height - kernel) / stride + 1,
                        width: (width - kernel) / stride + 1,
                    }
                }
                (LayerSpec::Flatten, ActShape::Map { channels, height, width }) => ActShape::Flat(channels * height * width),
                (LayerSpec::Flatten, s @ ActShape::Flat(_)) => s,
                (LayerSpec::Linear { in_features, out_features }, ActShape::Flat(n)) => {
                    if *in_features != n {
                        return Err(bad(i, format!("linear expects {in_features} features, got {n}")));
                    }
                    ActShape::Flat(*out_features)
                }
                (l, s) => return Err(bad(i, format!("{l:?} cannot follow activation {s:?}"))),
            };
            out.push(cur);
        }
        match cur {
            ActShape::Flat(n) if n == self.classes => Ok(out),
            other => Err(bad(self.layers.len(), format!("network ends in {other:?}, expected {} logits", self.classes))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Indices of convolution layers whose filters are grouped.
    pub fn grouped_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerSpec::Conv(s) if s.grouped).then_some(i))
            .collect()
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerSpec::Conv(_)).then_some(i))
            .collect()
    }

    pub fn conv(&self, layer: usize) -> Option<&ConvLayerSpec> {
        match self.layers.get(layer) {
            Some(LayerSpec::Conv(s)) => Some(s),
            _ => None,
        }
    }

    /// Spatial input extent `(H, W)` of every layer.
    pub fn input_extents(&self) -> Result<Vec<(usize, usize)>> {
        let shapes = self.shapes()?;
        let [_, h, w] = self.input_shape;
        let mut cur = (h, w);
        let mut out = Vec::with_capacity(shapes.len());
        for s in shapes {
            out.push(cur);
            if let ActShape::Map { height, width, .. } = s {
                cur = (height, width);
            }
        }
        Ok(out)
    }
}

/// Dense parameter and FLOP totals. Batchnorm contributes its affine
/// parameters but no FLOPs; ReLU and pooling contribute neither.
pub fn count_dense_params_flops(spec: &NetworkSpec) -> Result<Cost> {
    let shapes = spec.shapes()?;
    let mut cost = Cost::default();
    for (layer, shape) in spec.layers.iter().zip(&shapes) {
        match (layer, shape) {
            (LayerSpec::Conv(s), ActShape::Map { height, width, .. }) => {
                let k = (s.out_channels * s.in_channels * s.kernel.0 * s.kernel.1) as u64;
                cost.params += k + if s.has_bias { s.out_channels as u64 } else { 0 };
                cost.macs += k * (height * width) as u64;
            }
            (LayerSpec::BatchNorm { channels }, _) => cost.params += 2 * *channels as u64,
            (LayerSpec::Linear { in_features, out_features }, _) => {
                let k = (in_features * out_features) as u64;
                cost.params += k + *out_features as u64;
                cost.macs += k;
            }
            _ => {}
        }
    }
    cost.flops = 2 * cost.macs;
    Ok(cost)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Conv {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    None,
}

impl LayerParams {
    fn trainable(&self) -> Vec<&Tensor> {
        match self {
            LayerParams::Conv { weight, bias } => std::iter::once(weight).chain(bias.as_ref()).collect(),
            LayerParams::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            LayerParams::Linear { weight, bias } => vec![weight, bias],
            LayerParams::None => vec![],
        }
    }

    fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerParams::Conv { weight, bias } => std::iter::once(weight).chain(bias.as_mut()).collect(),
            LayerParams::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            LayerParams::Linear { weight, bias } => vec![weight, bias],
            LayerParams::None => vec![],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Structure mask for one convolution: per-weight keep mask plus which
/// output channels survive. Dead channels are zeroed after the layer's
/// batchnorm so they contribute nothing downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMask {
    pub weight: Tensor,
    pub alive: Vec<bool>,
}

/// Per-layer masks; `None` entries are unmasked.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkMask {
    pub conv: Vec<Option<ConvMask>>,
}

impl NetworkMask {
    pub fn get(&self, layer: usize) -> Option<&ConvMask> {
        self.conv.get(layer).and_then(Option::as_ref)
    }
}

/// Tape handles for every trainable tensor, grouped by layer.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<Vec<Var>>,
}

impl ParamVars {
    pub fn flat(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flatten().copied()
    }
}

/// Result of a forward pass recorded on a tape.
pub struct ForwardOutput {
    pub logits: Var,
    /// Batch statistics of each training-mode batchnorm, by layer index.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<LayerParams>,
}

impl Network {
    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero biases,
    /// identity batchnorm.
    pub fn init(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv(s) => {
                    let fan_in = s.in_channels * s.kernel.0 * s.kernel.1;
                    LayerParams::Conv {
                        weight: Tensor::randn(
                            &[s.out_channels, s.in_channels, s.kernel.0, s.kernel.1],
                            (2.0 / fan_in as f64).sqrt(),
                            rng,
                        ),
                        bias: s.has_bias.then(|| Tensor::zeros(&[s.out_channels])),
                    }
                }
                LayerSpec::BatchNorm { channels } => LayerParams::BatchNorm {
                    gamma: Tensor::ones(&[*channels]),
                    beta: Tensor::zeros(&[*channels]),
                    running_mean: vec![0.0; *channels],
                    running_var: vec![1.0; *channels],
                },
                LayerSpec::Linear { in_features, out_features } => LayerParams::Linear {
                    weight: Tensor::randn(&[*out_features, *in_features], (2.0 / *in_features as f64).sqrt(), rng),
                    bias: Tensor::zeros(&[*out_features]),
                },
                _ => LayerParams::None,
            })
            .collect();
        Ok(Network { spec, params })
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        self.params.iter().flat_map(LayerParams::trainable).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().flat_map(LayerParams::trainable_mut).collect()
    }

    pub fn conv_weight(&self, layer: usize) -> Option<&Tensor> {
        match self.params.get(layer) {
            Some(LayerParams::Conv { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn conv_weight_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        match self.params.get_mut(layer) {
            Some(LayerParams::Conv { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    /// Position of each layer's first tensor in [`Network::trainable`] order.
    pub fn trainable_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.params
            .iter()
            .map(|p| {
                let here = acc;
                acc += p.trainable().len();
                here
            })
            .collect()
    }

    /// Records every trainable tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        self.bind_with(tape, |_| requires_grad)
    }

    /// Records every trainable tensor on `tape`; `requires_grad(layer)`
    /// decides which layers receive gradients. Leaving early layers out
    /// skips their part of the backward pass.
    pub fn bind_with(&self, tape: &mut Tape, requires_grad: impl Fn(usize) -> bool) -> ParamVars {
        ParamVars {
            layers: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let rg = requires_grad(i);
                    p.trainable().into_iter().map(|t| tape.leaf(t.clone(), rg)).collect()
                })
                .collect(),
        }
    }

    /// Runs layers `range` starting from activation `x`.
    pub fn forward_range(
        &self,
        tape: &mut Tape,
        mut x: Var,
        pv: &ParamVars,
        mode: Mode,
        mask: Option<&NetworkMask>,
        range: std::ops::Range<usize>,
    ) -> Result<ForwardOutput> {
        let mut batch_stats = Vec::new();
        let mut pending_alive: Option<&[bool]> = None;
        for i in range {
            let vars = &pv.layers[i];
            x = match (&self.spec.layers[i], &self.params[i]) {
                (LayerSpec::Conv(s), LayerParams::Conv { .. }) => {
                    let mut w = vars[0];
                    let layer_mask = mask.and_then(|m| m.get(i));
                    if let Some(m) = layer_mask {
                        let wm = tape.constant(m.weight.clone());
                        w = tape.mul(w, wm)?;
                    }
                    let b = s.has_bias.then(|| vars[1]);
                    let y = tape.conv2d(x, w, b, s.stride, s.padding)?;
                    let followed_by_bn = matches!(self.spec.layers.get(i + 1), Some(LayerSpec::BatchNorm { .. }));
                    match layer_mask {
                        Some(m) if followed_by_bn => {
                            pending_alive = Some(&m.alive);
                            y
                        }
                        Some(m) => tape.mask_channels(y, &m.alive)?,
                        None => y,
                    }
                }
                (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm { running_mean, running_var, .. }) => {
                    let y = match mode {
                        Mode::Train => {
                            let (y, stats) = tape.batchnorm2d_train(x, vars[0], vars[1], BN_EPS)?;
                            batch_stats.push((i, stats));
                            y
                        }
                        Mode::Eval => tape.batchnorm2d_eval(x, vars[0], vars[1], running_mean, running_var, BN_EPS)?,
                    };
                    match pending_alive.take() {
                        Some(alive) => tape.mask_channels(y, alive)?,
                        None => y,
                    }
                }
                (LayerSpec::Relu, _) => tape.relu(x),
                (LayerSpec::MaxPool { kernel, stride }, _) => tape.maxpool2d(x, *kernel, *stride)?,
                (LayerSpec::Flatten, _) => {
                    let shape = tape.value(x).shape().to_vec();
                    let rest: usize = shape[1..].iter().product();
                    tape.reshape(x, &[shape[0], rest])?
                }
                (LayerSpec::Linear { .. }, LayerParams::Linear { .. }) => tape.linear(x, vars[0], Some(vars[1]))?,
                (l, _) => return Err(Error::Contract(format!("layer {i} ({l:?}) has mismatched parameters"))),
            };
        }
        Ok(ForwardOutput { logits: x, batch_stats })
    }

    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        pv: &ParamVars,
        mode: Mode,
        mask: Option<&NetworkMask>,
    ) -> Result<ForwardOutput> {
        self.check_input(tape.value(x))?;
        self.forward_range(tape, x, pv, mode, mask, 0..self.spec.layers.len())
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.ndim() != 4 || batch.shape()[1..] != self.spec.input_shape {
            return Err(Error::shape(
                "forward",
                format!("batch {:?} vs input shape {:?}", batch.shape(), self.spec.input_shape),
            ));
        }
        Ok(())
    }

    /// Blends batch statistics into running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, s) in stats {
            if let LayerParams::BatchNorm { running_mean, running_var, .. } = &mut self.params[*layer] {
                for c in 0..running_mean.len() {
                    running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * s.mean[c];
                    running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * s.var[c];
                }
            }
        }
    }

    /// Logits for `batch`. Train mode normalizes with batch statistics and
    /// updates the running estimates.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pv = self.bind(&mut tape, false);
        let out = self.forward_tape(&mut tape, x, &pv, mode, None)?;
        if mode == Mode::Train {
            self.update_running_stats(&out.batch_stats);
        }
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode logits without touching running statistics.
    pub fn logits(&self, batch: &Tensor, mask: Option<&NetworkMask>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let pv = self.bind(&mut tape, false);
        let out = self.forward_tape(&mut tape, x, &pv, Mode::Eval, mask)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Applies `f(param, grad)` to every trainable tensor in order.
    pub fn for_each_trainable(&mut self, grads: &[Tensor], mut f: impl FnMut(usize, &mut Tensor, &Tensor)) {
        for (i, (p, g)) in self.trainable_mut().into_iter().zip(grads).enumerate() {
            f(i, p, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_net_composes() {
        let spec = build_toy_net();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes.last(), Some(&ActShape::Flat(10)));
        assert_eq!(spec.grouped_layers(), vec![4]);
        assert_eq!(spec.conv(4).unwrap().out_channels, 8);
    }

    #[test]
    fn broken_composition_is_rejected() {
        let mut spec = build_toy_net();
        spec.layers[5] = LayerSpec::BatchNorm { channels: 4 };
        assert!(spec.validate().is_err());
        let mut spec = build_toy_net();
        spec.layers.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn one_by_one_conv_cost() {
        let spec = |bias| NetworkSpec {
            layers: vec![
                LayerSpec::Conv(ConvLayerSpec {
                    out_channels: 1,
                    in_channels: 1,
                    kernel: (1, 1),
                    stride: 1,
                    padding: 0,
                    has_bias: bias,
                    grouped: false,
                }),
                LayerSpec::Flatten,
            ],
            classes: 1,
            input_shape: [1, 1, 1],
        };
        let c = count_dense_params_flops(&spec(false)).unwrap();
        assert_eq!((c.params, c.flops, c.macs), (1, 2, 1));
        assert_eq!(count_dense_params_flops(&spec(true)).unwrap().params, 2);
    }

    #[test]
    fn eval_forward_is_deterministic_and_train_updates_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::init(build_toy_net(), &mut rng).unwrap();
        let x = Tensor::randn(&[2, 1, 28, 28], 1.0, &mut rng);
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let before = net.params[1].clone();
        net.forward(&x, Mode::Train).unwrap();
        assert_ne!(before, net.params[1]);
    }

    #[test]
    fn zero_image_gives_finite_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::init(build_toy_net(), &mut rng).unwrap();
        let y = net.forward(&Tensor::zeros(&[1, 1, 28, 28]), Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
        assert!(y.all_finite());
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Network::init(build_toy_net(), &mut rng).unwrap();
        let err = net.forward(&Tensor::zeros(&[1, 1, 27, 28]), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }
}
