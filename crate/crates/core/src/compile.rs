//! Lowering a pruned structure to grouped convolutions, cost accounting, and
//! checkpoint files.
//!
//! A compiled convolution stores, per surviving group, the kept filters'
//! weights restricted to the group's gather list. Gather indices point into
//! the *compiled* channel order of the producing layer (its surviving filters
//! concatenated group by group), so channels read by several groups are
//! simply gathered more than once.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, ParseError, Result};
use crate::grouping::{GroupParameters, LayerGroups};
use crate::model::{
    count_dense_params_flops, ActShape, ConvLayerSpec, Cost, LayerParams, LayerSpec, Network, NetworkSpec, BN_EPS,
};
use crate::pruning::PrunedStructure;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledGroup {
    /// Original indices of the group's filters (provenance only).
    pub filters: Vec<usize>,
    /// Positions in the compiled input channel list.
    pub gather: Vec<usize>,
    /// `[|filters|, |gather|, K_h, K_w]`.
    pub weight: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedConv {
    pub in_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: Vec<CompiledGroup>,
    /// One entry per output channel, in group order.
    pub bias: Option<Tensor>,
}

impl GroupedConv {
    pub fn out_channels(&self) -> usize {
        self.groups.iter().map(|g| g.filters.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CompiledLayer {
    Conv(GroupedConv),
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledModel {
    pub layers: Vec<CompiledLayer>,
    pub input_shape: [usize; 3],
    pub classes: usize,
    /// Ordered key/value provenance, including the stored cost counts.
    pub metadata: Vec<(String, String)>,
}

fn select(src: &[f64], indices: &[usize]) -> Vec<f64> {
    indices.iter().map(|&i| src[i]).collect()
}

/// Lowers `net` under `structure` into grouped convolutions. The result
/// computes the same function as `net` under `structure.mask(net)` in eval
/// mode.
pub fn compile(net: &Network, structure: &PrunedStructure) -> Result<CompiledModel> {
    structure.validate(&net.spec)?;
    let shapes = net.spec.shapes()?;
    let [c0, _, _] = net.spec.input_shape;
    // compiled position -> original channel of the current activation
    let mut order: Vec<usize> = (0..c0).collect();
    let mut flat_plane: Option<usize> = None;
    let mut layers = Vec::with_capacity(net.spec.layers.len());
    for (i, (spec, params)) in net.spec.layers.iter().zip(&net.params).enumerate() {
        let layer = match (spec, params) {
            (LayerSpec::Conv(s), LayerParams::Conv { weight, bias }) => {
                let ls = structure.layer(i).ok_or_else(|| Error::structure(i, None, "missing from structure"))?;
                let mut position = vec![None; s.in_channels];
                for (p, &c) in order.iter().enumerate() {
                    position[c] = Some(p);
                }
                let area = s.kernel.0 * s.kernel.1;
                let mut groups = Vec::new();
                for (gi, g) in ls.groups.iter().enumerate() {
                    if g.is_empty() {
                        continue;
                    }
                    let gather = g
                        .gather
                        .iter()
                        .map(|&c| {
                            position[c].ok_or_else(|| {
                                Error::structure(i, Some(gi), format!("gathers input channel {c}, which was pruned upstream"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut w = Vec::with_capacity(g.filters.len() * g.gather.len() * area);
                    for &k in &g.filters {
                        for &c in &g.gather {
                            let start = (k * s.in_channels + c) * area;
                            w.extend_from_slice(&weight.data()[start..start + area]);
                        }
                    }
                    groups.push(CompiledGroup {
                        filters: g.filters.clone(),
                        gather,
                        weight: Tensor::new(vec![g.filters.len(), g.gather.len(), s.kernel.0, s.kernel.1], w)?,
                    });
                }
                order = ls.channel_order();
                CompiledLayer::Conv(GroupedConv {
                    in_channels: position.iter().filter(|p| p.is_some()).count(),
                    kernel: s.kernel,
                    stride: s.stride,
                    padding: s.padding,
                    bias: bias.as_ref().map(|b| Tensor::new(vec![order.len()], select(b.data(), &order))).transpose()?,
                    groups,
                })
            }
            (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                CompiledLayer::BatchNorm {
                    gamma: Tensor::new(vec![order.len()], select(gamma.data(), &order))?,
                    beta: Tensor::new(vec![order.len()], select(beta.data(), &order))?,
                    running_mean: select(running_mean, &order),
                    running_var: select(running_var, &order),
                }
            }
            (LayerSpec::Relu, _) => CompiledLayer::Relu,
            (LayerSpec::MaxPool { kernel, stride }, _) => CompiledLayer::MaxPool {
                kernel: *kernel,
                stride: *stride,
            },
            (LayerSpec::Flatten, _) => {
                let plane = match i.checked_sub(1).map(|j| shapes[j]) {
                    Some(ActShape::Map { height, width, .. }) => height * width,
                    None => net.spec.input_shape[1] * net.spec.input_shape[2],
                    Some(ActShape::Flat(_)) => 1,
                };
                flat_plane = Some(plane);
                CompiledLayer::Flatten
            }
            (LayerSpec::Linear { in_features, out_features }, LayerParams::Linear { weight, bias }) => {
                let columns: Vec<usize> = match flat_plane.take() {
                    Some(plane) => order.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect(),
                    None => (0..*in_features).collect(),
                };
                let mut w = Vec::with_capacity(out_features * columns.len());
                for o in 0..*out_features {
                    let row = &weight.data()[o * in_features..(o + 1) * in_features];
                    w.extend(columns.iter().map(|&c| row[c]));
                }
                order = (0..*out_features).collect();
                CompiledLayer::Linear {
                    weight: Tensor::new(vec![*out_features, columns.len()], w)?,
                    bias: bias.clone(),
                }
            }
            (l, _) => return Err(Error::Contract(format!("layer {i} ({l:?}) has mismatched parameters"))),
        };
        layers.push(layer);
    }
    let mut model = CompiledModel {
        layers,
        input_shape: net.spec.input_shape,
        classes: net.spec.classes,
        metadata: Vec::new(),
    };
    let dense = count_dense_params_flops(&net.spec)?;
    let cost = model.cost()?;
    model.metadata = cost_metadata(&cost, &dense);
    Ok(model)
}

fn cost_metadata(cost: &Cost, dense: &Cost) -> Vec<(String, String)> {
    let (dp, df) = cost.reduction_vs(dense);
    vec![
        ("params".into(), cost.params.to_string()),
        ("flops".into(), cost.flops.to_string()),
        ("macs".into(), cost.macs.to_string()),
        ("dense_params".into(), dense.params.to_string()),
        ("dense_flops".into(), dense.flops.to_string()),
        ("params_reduction_pct".into(), format!("{dp:.2}")),
        ("flops_reduction_pct".into(), format!("{df:.2}")),
    ]
}

impl CompiledModel {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Appends or replaces a metadata entry.
    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    /// Eval-mode logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 4 || x.shape()[1..] != self.input_shape {
            return Err(Error::shape(
                "compiled forward",
                format!("batch {:?} vs input shape {:?}", x.shape(), self.input_shape),
            ));
        }
        let mut tape = Tape::new();
        let mut v = tape.constant(x.clone());
        for layer in &self.layers {
            v = match layer {
                CompiledLayer::Conv(c) => {
                    let ws: Vec<_> = c.groups.iter().map(|g| tape.constant(g.weight.clone())).collect();
                    let gathers: Vec<Vec<usize>> = c.groups.iter().map(|g| g.gather.clone()).collect();
                    let b = c.bias.as_ref().map(|b| tape.constant(b.clone()));
                    tape.grouped_conv2d(v, &ws, &gathers, b, c.stride, c.padding)?
                }
                CompiledLayer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    let g = tape.constant(gamma.clone());
                    let b = tape.constant(beta.clone());
                    tape.batchnorm2d_eval(v, g, b, running_mean, running_var, BN_EPS)?
                }
                CompiledLayer::Relu => tape.relu(v),
                CompiledLayer::MaxPool { kernel, stride } => tape.maxpool2d(v, *kernel, *stride)?,
                CompiledLayer::Flatten => {
                    let shape = tape.value(v).shape().to_vec();
                    let rest: usize = shape[1..].iter().product();
                    tape.reshape(v, &[shape[0], rest])?
                }
                CompiledLayer::Linear { weight, bias } => {
                    let w = tape.constant(weight.clone());
                    let b = tape.constant(bias.clone());
                    tape.linear(v, w, Some(b))?
                }
            };
        }
        Ok(tape.value(v).clone())
    }

    /// Parameters (including batchnorm affine terms), FLOPs and MACs of the
    /// compiled layers.
    pub fn cost(&self) -> Result<Cost> {
        let [_, mut h, mut w] = self.input_shape;
        let mut cost = Cost::default();
        for layer in &self.layers {
            match layer {
                CompiledLayer::Conv(c) => {
                    let oh = (h + 2 * c.padding - c.kernel.0) / c.stride + 1;
                    let ow = (w + 2 * c.padding - c.kernel.1) / c.stride + 1;
                    let k: u64 = c.groups.iter().map(|g| g.weight.numel() as u64).sum();
                    cost.params += k + c.bias.as_ref().map_or(0, |b| b.numel() as u64);
                    cost.macs += k * (oh * ow) as u64;
                    (h, w) = (oh, ow);
                }
                CompiledLayer::BatchNorm { gamma, .. } => cost.params += 2 * gamma.numel() as u64,
                CompiledLayer::MaxPool { kernel, stride } => {
                    h = (h - kernel) / stride + 1;
                    w = (w - kernel) / stride + 1;
                }
                CompiledLayer::Linear { weight, bias } => {
                    cost.params += (weight.numel() + bias.numel()) as u64;
                    cost.macs += weight.numel() as u64;
                }
                CompiledLayer::Relu | CompiledLayer::Flatten => {}
            }
        }
        cost.flops = 2 * cost.macs;
        Ok(cost)
    }
}

/// Compiled cost and its reduction (percent, two decimals) against the dense
/// network the model came from.
pub fn count_pruned_params_flops(model: &CompiledModel) -> Result<(Cost, f64, f64)> {
    let cost = model.cost()?;
    let dense = Cost {
        params: meta_u64(model, "dense_params")?,
        flops: meta_u64(model, "dense_flops")?,
        macs: meta_u64(model, "dense_flops")? / 2,
    };
    let (dp, df) = cost.reduction_vs(&dense);
    Ok((cost, dp, df))
}

fn meta_u64(model: &CompiledModel, key: &str) -> Result<u64> {
    model
        .meta(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Contract(format!("compiled model lacks numeric metadata {key:?}")))
}

/// Cost implied by a structure, computed from the specification alone
/// (without building the compiled model).
pub fn count_structure_cost(spec: &NetworkSpec, structure: &PrunedStructure) -> Result<Cost> {
    let shapes = spec.shapes()?;
    let mut cost = Cost::default();
    let mut alive_channels = spec.input_shape[0];
    let mut plane = spec.input_shape[1] * spec.input_shape[2];
    for (i, (layer, shape)) in spec.layers.iter().zip(&shapes).enumerate() {
        match (layer, shape) {
            (LayerSpec::Conv(s), ActShape::Map { height, width, .. }) => {
                let ls = structure.layer(i).ok_or_else(|| Error::structure(i, None, "missing from structure"))?;
                let area = (s.kernel.0 * s.kernel.1) as u64;
                let k: u64 = ls.groups.iter().map(|g| (g.filters.len() * g.gather.len()) as u64 * area).sum();
                alive_channels = ls.groups.iter().map(|g| g.filters.len()).sum();
                cost.params += k + if s.has_bias { alive_channels as u64 } else { 0 };
                cost.macs += k * (height * width) as u64;
                plane = height * width;
            }
            (LayerSpec::BatchNorm { .. }, _) => cost.params += 2 * alive_channels as u64,
            (LayerSpec::MaxPool { .. }, ActShape::Map { height, width, .. }) => plane = height * width,
            (LayerSpec::Flatten, _) => {
                alive_channels *= plane;
                plane = 1;
            }
            (LayerSpec::Linear { out_features, .. }, _) => {
                let k = (alive_channels * out_features) as u64;
                cost.params += k + *out_features as u64;
                cost.macs += k;
                alive_channels = *out_features;
            }
            _ => {}
        }
    }
    cost.flops = 2 * cost.macs;
    Ok(cost)
}

// ---- checkpoints ------------------------------------------------------------

pub const MAGIC: [u8; 4] = *b"DSPC";
pub const FORMAT_VERSION: u32 = 1;
const FLAG_COMPILED: u32 = 1;
const FLAG_GROUPS: u32 = 2;

const TAG_GROUPED_CONV: u8 = 1;
const TAG_BATCHNORM: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_MAXPOOL: u8 = 4;
const TAG_LINEAR: u8 = 5;
const TAG_FLATTEN: u8 = 6;
const TAG_DENSE_CONV: u8 = 7;
const TAG_GROUP_PARAMS: u8 = 8;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn indices(&mut self, v: &[usize]) {
        self.u32(v.len());
        v.iter().for_each(|&x| self.u32(x));
    }
    fn floats(&mut self, v: &[f64]) {
        self.u32(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn tensor(&mut self, t: &Tensor) {
        self.indices(t.shape());
        t.data().iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], ParseError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ParseError::Truncated {
            context: context.to_string(),
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self, c: &str) -> Result<u8, ParseError> {
        Ok(self.take(1, c)?[0])
    }
    fn u16(&mut self, c: &str) -> Result<u16, ParseError> {
        Ok(u16::from_le_bytes(self.take(2, c)?.try_into().unwrap()))
    }
    fn u32(&mut self, c: &str) -> Result<usize, ParseError> {
        Ok(u32::from_le_bytes(self.take(4, c)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self, c: &str) -> Result<f64, ParseError> {
        Ok(f64::from_le_bytes(self.take(8, c)?.try_into().unwrap()))
    }
    /// Length prefix, rejected early if the remaining bytes cannot hold it.
    fn len(&mut self, elem: usize, c: &str) -> Result<usize, ParseError> {
        let n = self.u32(c)?;
        if n.saturating_mul(elem) > self.bytes.len() - self.at {
            return Err(ParseError::Truncated { context: c.to_string() });
        }
        Ok(n)
    }
    fn str(&mut self, c: &str) -> Result<String, ParseError> {
        let n = self.len(1, c)?;
        String::from_utf8(self.take(n, c)?.to_vec()).map_err(|_| ParseError::Malformed(format!("{c}: invalid UTF-8")))
    }
    fn indices(&mut self, c: &str) -> Result<Vec<usize>, ParseError> {
        let n = self.len(4, c)?;
        (0..n).map(|_| self.u32(c)).collect()
    }
    fn floats(&mut self, c: &str) -> Result<Vec<f64>, ParseError> {
        let n = self.len(8, c)?;
        (0..n).map(|_| self.f64(c)).collect()
    }
    fn tensor(&mut self, c: &str) -> Result<Tensor, ParseError> {
        let shape = self.indices(c)?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| ParseError::Malformed(format!("{c}: shape overflow")))?;
        if n.saturating_mul(8) > self.bytes.len() - self.at {
            return Err(ParseError::Truncated { context: c.to_string() });
        }
        let data = (0..n).map(|_| self.f64(c)).collect::<Result<Vec<_>, _>>()?;
        Tensor::new(shape, data).map_err(|e| ParseError::Malformed(format!("{c}: {e}")))
    }
}

fn header(w: &mut Writer, flags: u32, metadata: &[(String, String)], input_shape: [usize; 3], classes: usize) {
    w.0.extend_from_slice(&MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.u32(flags as usize);
    w.u32(metadata.len());
    for (k, v) in metadata {
        w.str(k);
        w.str(v);
    }
    input_shape.iter().for_each(|&d| w.u32(d));
    w.u32(classes);
}

struct Header {
    flags: u32,
    metadata: Vec<(String, String)>,
    input_shape: [usize; 3],
    classes: usize,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header, ParseError> {
    let found: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if found != MAGIC {
        return Err(ParseError::BadMagic { expected: MAGIC, found });
    }
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(ParseError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let flags = r.u32("flags")? as u32;
    let n = r.len(8, "metadata count")?;
    let metadata = (0..n)
        .map(|_| Ok((r.str("metadata key")?, r.str("metadata value")?)))
        .collect::<Result<Vec<_>, ParseError>>()?;
    let input_shape = [r.u32("input shape")?, r.u32("input shape")?, r.u32("input shape")?];
    let classes = r.u32("classes")?;
    Ok(Header {
        flags,
        metadata,
        input_shape,
        classes,
    })
}

fn write_simple(w: &mut Writer, spec: &LayerSpec) {
    match spec {
        LayerSpec::Relu => w.u8(TAG_RELU),
        LayerSpec::MaxPool { kernel, stride } => {
            w.u8(TAG_MAXPOOL);
            w.u32(*kernel);
            w.u32(*stride);
        }
        LayerSpec::Flatten => w.u8(TAG_FLATTEN),
        _ => unreachable!("parameterized layer"),
    }
}

fn write_bn(w: &mut Writer, gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64]) {
    w.u8(TAG_BATCHNORM);
    w.tensor(gamma);
    w.tensor(beta);
    w.floats(mean);
    w.floats(var);
}

/// Serializes a dense network, optionally with its group logits.
pub fn encode_dense(net: &Network, groups: Option<&GroupParameters>, metadata: &[(String, String)]) -> Vec<u8> {
    let mut w = Writer::default();
    let flags = if groups.is_some() { FLAG_GROUPS } else { 0 };
    header(&mut w, flags, metadata, net.spec.input_shape, net.spec.classes);
    w.u32(net.spec.layers.len());
    for (spec, params) in net.spec.layers.iter().zip(&net.params) {
        match (spec, params) {
            (LayerSpec::Conv(s), LayerParams::Conv { weight, bias }) => {
                w.u8(TAG_DENSE_CONV);
                for v in [s.in_channels, s.out_channels, s.kernel.0, s.kernel.1, s.stride, s.padding] {
                    w.u32(v);
                }
                w.u8(s.has_bias as u8);
                w.u8(s.grouped as u8);
                w.tensor(weight);
                if let Some(b) = bias {
                    w.tensor(b);
                }
            }
            (LayerSpec::BatchNorm { .. }, LayerParams::BatchNorm { gamma, beta, running_mean, running_var }) => {
                write_bn(&mut w, gamma, beta, running_mean, running_var)
            }
            (LayerSpec::Linear { in_features, out_features }, LayerParams::Linear { weight, bias }) => {
                w.u8(TAG_LINEAR);
                w.u32(*in_features);
                w.u32(*out_features);
                w.tensor(weight);
                w.tensor(bias);
            }
            (other, _) => write_simple(&mut w, other),
        }
    }
    if let Some(g) = groups {
        w.u8(TAG_GROUP_PARAMS);
        w.f64(g.tau);
        w.u32(g.groups);
        w.u32(g.layers.len());
        for l in &g.layers {
            w.u32(l.layer);
            w.tensor(&l.pi);
        }
    }
    w.0
}

/// A dense checkpoint read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseCheckpoint {
    pub net: Network,
    pub groups: Option<GroupParameters>,
    pub metadata: Vec<(String, String)>,
}

fn expect_shape(t: &Tensor, shape: &[usize], what: &str) -> Result<(), ParseError> {
    if t.shape() != shape {
        return Err(ParseError::Malformed(format!("{what} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(())
}

fn finish(r: &Reader<'_>) -> Result<(), ParseError> {
    if r.at != r.bytes.len() {
        return Err(ParseError::Malformed(format!("{} trailing bytes", r.bytes.len() - r.at)));
    }
    Ok(())
}

pub fn decode_dense(bytes: &[u8]) -> Result<DenseCheckpoint> {
    let mut r = Reader { bytes, at: 0 };
    let h = read_header(&mut r)?;
    if h.flags & FLAG_COMPILED != 0 {
        return Err(ParseError::Malformed("file holds a compiled model, not a dense network".into()).into());
    }
    let n = r.len(1, "layer count")?;
    let mut layers = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        match r.u8("layer tag")? {
            TAG_DENSE_CONV => {
                let e: Vec<usize> = (0..6).map(|_| r.u32("conv extents")).collect::<Result<_, _>>()?;
                let has_bias = r.u8("conv bias flag")? != 0;
                let grouped = r.u8("conv grouped flag")? != 0;
                let weight = r.tensor("conv weight")?;
                expect_shape(&weight, &[e[1], e[0], e[2], e[3]], "conv weight")?;
                let bias = if has_bias { Some(r.tensor("conv bias")?) } else { None };
                if let Some(b) = &bias {
                    expect_shape(b, &[e[1]], "conv bias")?;
                }
                layers.push(LayerSpec::Conv(ConvLayerSpec {
                    in_channels: e[0],
                    out_channels: e[1],
                    kernel: (e[2], e[3]),
                    stride: e[4],
                    padding: e[5],
                    has_bias,
                    grouped,
                }));
                params.push(LayerParams::Conv { weight, bias });
            }
            TAG_BATCHNORM => {
                let (gamma, beta) = (r.tensor("bn gamma")?, r.tensor("bn beta")?);
                let (mean, var) = (r.floats("bn mean")?, r.floats("bn var")?);
                let c = gamma.numel();
                if beta.numel() != c || mean.len() != c || var.len() != c {
                    return Err(ParseError::Malformed("batchnorm vectors disagree in length".into()).into());
                }
                layers.push(LayerSpec::BatchNorm { channels: c });
                params.push(LayerParams::BatchNorm {
                    gamma,
                    beta,
                    running_mean: mean,
                    running_var: var,
                });
            }
            TAG_LINEAR => {
                let (i, o) = (r.u32("linear extents")?, r.u32("linear extents")?);
                let weight = r.tensor("linear weight")?;
                expect_shape(&weight, &[o, i], "linear weight")?;
                let bias = r.tensor("linear bias")?;
                expect_shape(&bias, &[o], "linear bias")?;
                layers.push(LayerSpec::Linear {
                    in_features: i,
                    out_features: o,
                });
                params.push(LayerParams::Linear { weight, bias });
            }
            TAG_RELU => {
                layers.push(LayerSpec::Relu);
                params.push(LayerParams::None);
            }
            TAG_MAXPOOL => {
                let (kernel, stride) = (r.u32("pool extents")?, r.u32("pool extents")?);
                layers.push(LayerSpec::MaxPool { kernel, stride });
                params.push(LayerParams::None);
            }
            TAG_FLATTEN => {
                layers.push(LayerSpec::Flatten);
                params.push(LayerParams::None);
            }
            tag => return Err(ParseError::Malformed(format!("unknown layer tag {tag}")).into()),
        }
    }
    let spec = NetworkSpec {
        layers,
        classes: h.classes,
        input_shape: h.input_shape,
    };
    spec.validate()
        .map_err(|e| ParseError::Malformed(format!("stored network does not compose: {e}")))?;
    let groups = if h.flags & FLAG_GROUPS != 0 {
        if r.u8("group tag")? != TAG_GROUP_PARAMS {
            return Err(ParseError::Malformed("expected group parameter block".into()).into());
        }
        let tau = r.f64("tau")?;
        let groups = r.u32("group count")?;
        let n = r.len(4, "grouped layer count")?;
        let layers = (0..n)
            .map(|_| {
                let layer = r.u32("grouped layer index")?;
                let pi = r.tensor("group logits")?;
                let cout = spec.conv(layer).map(|s| s.out_channels).ok_or_else(|| {
                    ParseError::Malformed(format!("group logits for non-convolution layer {layer}"))
                })?;
                expect_shape(&pi, &[cout, groups], "group logits")?;
                Ok(LayerGroups { layer, pi })
            })
            .collect::<Result<Vec<_>, ParseError>>()?;
        Some(GroupParameters { layers, tau, groups })
    } else {
        None
    };
    finish(&r)?;
    Ok(DenseCheckpoint {
        net: Network { spec, params },
        groups,
        metadata: h.metadata,
    })
}

/// Serializes a compiled model.
pub fn encode_compiled(model: &CompiledModel) -> Vec<u8> {
    let mut w = Writer::default();
    header(&mut w, FLAG_COMPILED, &model.metadata, model.input_shape, model.classes);
    w.u32(model.layers.len());
    for layer in &model.layers {
        match layer {
            CompiledLayer::Conv(c) => {
                w.u8(TAG_GROUPED_CONV);
                for v in [c.in_channels, c.out_channels(), c.kernel.0, c.kernel.1, c.stride, c.padding] {
                    w.u32(v);
                }
                w.u8(c.bias.is_some() as u8);
                w.u16(c.groups.len() as u16);
                for g in &c.groups {
                    w.indices(&g.filters);
                    w.indices(&g.gather);
                    w.tensor(&g.weight);
                }
                if let Some(b) = &c.bias {
                    w.tensor(b);
                }
            }
            CompiledLayer::BatchNorm { gamma, beta, running_mean, running_var } => {
                write_bn(&mut w, gamma, beta, running_mean, running_var)
            }
            CompiledLayer::Relu => write_simple(&mut w, &LayerSpec::Relu),
            CompiledLayer::MaxPool { kernel, stride } => write_simple(
                &mut w,
                &LayerSpec::MaxPool {
                    kernel: *kernel,
                    stride: *stride,
                },
            ),
            CompiledLayer::Flatten => write_simple(&mut w, &LayerSpec::Flatten),
            CompiledLayer::Linear { weight, bias } => {
                w.u8(TAG_LINEAR);
                w.u32(weight.dim(1));
                w.u32(weight.dim(0));
                w.tensor(weight);
                w.tensor(bias);
            }
        }
    }
    w.0
}

pub fn decode_compiled(bytes: &[u8]) -> Result<CompiledModel> {
    let mut r = Reader { bytes, at: 0 };
    let h = read_header(&mut r)?;
    if h.flags & FLAG_COMPILED == 0 {
        return Err(ParseError::Malformed("file holds a dense network, not a compiled model".into()).into());
    }
    let n = r.len(1, "layer count")?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let layer = match r.u8("layer tag")? {
            TAG_GROUPED_CONV => {
                let e: Vec<usize> = (0..6).map(|_| r.u32("conv extents")).collect::<Result<_, _>>()?;
                let has_bias = r.u8("conv bias flag")? != 0;
                let ng = r.u16("group count")? as usize;
                let mut groups = Vec::with_capacity(ng);
                for _ in 0..ng {
                    let filters = r.indices("group filters")?;
                    let gather = r.indices("group gather")?;
                    let weight = r.tensor("group weight")?;
                    expect_shape(&weight, &[filters.len(), gather.len(), e[2], e[3]], "group weight")?;
                    if let Some(&bad) = gather.iter().find(|&&g| g >= e[0]) {
                        return Err(ParseError::Malformed(format!("gather index {bad} exceeds {} inputs", e[0])).into());
                    }
                    groups.push(CompiledGroup { filters, gather, weight });
                }
                let bias = if has_bias { Some(r.tensor("conv bias")?) } else { None };
                let conv = GroupedConv {
                    in_channels: e[0],
                    kernel: (e[2], e[3]),
                    stride: e[4],
                    padding: e[5],
                    groups,
                    bias,
                };
                if conv.out_channels() != e[1] {
                    return Err(ParseError::Malformed("grouped conv output count disagrees with its groups".into()).into());
                }
                CompiledLayer::Conv(conv)
            }
            TAG_BATCHNORM => {
                let (gamma, beta) = (r.tensor("bn gamma")?, r.tensor("bn beta")?);
                let (running_mean, running_var) = (r.floats("bn mean")?, r.floats("bn var")?);
                CompiledLayer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                }
            }
            TAG_RELU => CompiledLayer::Relu,
            TAG_MAXPOOL => CompiledLayer::MaxPool {
                kernel: r.u32("pool extents")?,
                stride: r.u32("pool extents")?,
            },
            TAG_FLATTEN => CompiledLayer::Flatten,
            TAG_LINEAR => {
                let (i, o) = (r.u32("linear extents")?, r.u32("linear extents")?);
                let weight = r.tensor("linear weight")?;
                expect_shape(&weight, &[o, i], "linear weight")?;
                let bias = r.tensor("linear bias")?;
                expect_shape(&bias, &[o], "linear bias")?;
                CompiledLayer::Linear { weight, bias }
            }
            tag => return Err(ParseError::Malformed(format!("unknown layer tag {tag}")).into()),
        };
        layers.push(layer);
    }
    finish(&r)?;
    let model = CompiledModel {
        layers,
        input_shape: h.input_shape,
        classes: h.classes,
        metadata: h.metadata,
    };
    let cost = model.cost()?;
    for (key, value) in [("params", cost.params), ("flops", cost.flops)] {
        match model.meta(key).map(str::parse::<u64>) {
            Some(Ok(stored)) if stored == value => {}
            other => {
                return Err(ParseError::Malformed(format!(
                    "stored {key} {other:?} disagrees with recount {value}"
                ))
                .into())
            }
        }
    }
    Ok(model)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it, so a
/// failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_dense(path: &Path, net: &Network, groups: Option<&GroupParameters>, metadata: &[(String, String)]) -> Result<()> {
    write_atomic(path, &encode_dense(net, groups, metadata))
}

pub fn load_dense(path: &Path) -> Result<DenseCheckpoint> {
    decode_dense(&std::fs::read(path)?)
}

pub fn save_compiled(path: &Path, model: &CompiledModel) -> Result<()> {
    write_atomic(path, &encode_compiled(model))
}

pub fn load_compiled(path: &Path) -> Result<CompiledModel> {
    decode_compiled(&std::fs::read(path)?)
}
