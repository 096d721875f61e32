//! One-shot group-channel pruning.
//!
//! After group learning every filter is assigned to its most likely group.
//! Inside each group the input channels are ranked by the energy the group's
//! filters place on them, and the weakest channels are removed for as long as
//! the removed energy stays below a fraction `β` of the group's total:
//! `‖Q‖² / ‖G‖² < β`. Channels no group reads any more kill the filters that
//! produce them, and filters left without any input die in turn.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grouping::GroupParameters;
use crate::model::{ConvMask, LayerSpec, Network, NetworkMask, NetworkSpec};
use crate::tensor::Tensor;

/// Discrete group of every filter of one grouped layer (zero-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerAssignment {
    pub layer: usize,
    pub groups: usize,
    pub group_of_filter: Vec<usize>,
}

impl LayerAssignment {
    pub fn new(layer: usize, groups: usize, group_of_filter: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = group_of_filter.iter().find(|&&g| g >= groups) {
            return Err(Error::structure(layer, Some(bad), format!("group index out of range for {groups} groups")));
        }
        Ok(LayerAssignment {
            layer,
            groups,
            group_of_filter,
        })
    }

    /// Filter indices of group `p`, ascending.
    pub fn members(&self, p: usize) -> Vec<usize> {
        (0..self.group_of_filter.len()).filter(|&k| self.group_of_filter[k] == p).collect()
    }

    /// Every filter in exactly one group, every group index in range.
    pub fn is_partition(&self, filters: usize) -> bool {
        self.group_of_filter.len() == filters && self.group_of_filter.iter().all(|&g| g < self.groups)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupAssignment {
    pub layers: Vec<LayerAssignment>,
}

impl GroupAssignment {
    pub fn layer(&self, layer: usize) -> Option<&LayerAssignment> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Every filter of every grouped layer in group 0.
    pub fn single_group(spec: &NetworkSpec) -> Self {
        GroupAssignment {
            layers: spec
                .grouped_layers()
                .into_iter()
                .map(|layer| LayerAssignment {
                    layer,
                    groups: 1,
                    group_of_filter: vec![0; spec.conv(layer).unwrap().out_channels],
                })
                .collect(),
        }
    }
}

/// Row-wise argmax of a `[rows, N]` tensor; ties go to the lowest index.
pub fn discretize_rows(pi: &Tensor) -> Vec<usize> {
    pi.argmax_rows()
}

/// Assigns every filter to the group with the largest logit.
pub fn discretize_alpha(params: &GroupParameters) -> GroupAssignment {
    GroupAssignment {
        layers: params
            .layers
            .iter()
            .map(|l| LayerAssignment {
                layer: l.layer,
                groups: params.groups,
                group_of_filter: discretize_rows(&l.pi),
            })
            .collect(),
    }
}

/// `I_pm = Σ_{k ∈ p} ‖W_km‖²`, indexed `[p][m]`.
pub fn compute_importance(w: &Tensor, assignment: &LayerAssignment) -> Result<Vec<Vec<f64>>> {
    if w.ndim() != 4 || w.dim(0) != assignment.group_of_filter.len() {
        return Err(Error::shape(
            "compute_importance",
            format!("weight {:?} vs {} assigned filters", w.shape(), assignment.group_of_filter.len()),
        ));
    }
    let (cin, area) = (w.dim(1), w.dim(2) * w.dim(3));
    let mut scores = vec![vec![0.0; cin]; assignment.groups];
    for (k, &p) in assignment.group_of_filter.iter().enumerate() {
        for m in 0..cin {
            let s = &w.data()[(k * cin + m) * area..(k * cin + m + 1) * area];
            scores[p][m] += s.iter().map(|v| v * v).sum::<f64>();
        }
    }
    Ok(scores)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
    }
    Ok(())
}

/// Ascending `(score, index)` order.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Largest set of entries whose summed score stays below `β` of the total,
/// taken greedily in ascending order. Returns indices ascending together with
/// the achieved ratio. A zero total counts as ratio zero, so every entry of an
/// all-zero set is removed for any `β > 0`.
pub fn greedy_ratio_prune(scores: &[f64], beta: f64) -> Result<(Vec<usize>, f64)> {
    check_beta(beta)?;
    let total: f64 = scores.iter().sum();
    let ratio = |q: f64| if total > 0.0 { q / total } else { 0.0 };
    let mut removed = Vec::new();
    let mut q = 0.0;
    for i in ascending(scores) {
        if ratio(q + scores[i]) < beta {
            q += scores[i];
            removed.push(i);
        } else {
            break;
        }
    }
    removed.sort_unstable();
    Ok((removed, ratio(q)))
}

/// Pruned input channels of every group, `[p] -> ascending channels`.
pub fn find_redundant_channels(scores: &[Vec<f64>], beta: f64) -> Result<Vec<Vec<usize>>> {
    check_beta(beta)?;
    scores.iter().map(|s| greedy_ratio_prune(s, beta).map(|r| r.0)).collect()
}

/// The `round(rate · len)` lowest-scoring entries, ties to the lower index.
pub fn lowest_fraction(scores: &[f64], rate: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("pruning rate must lie in [0, 1], got {rate}")));
    }
    let count = (rate * scores.len() as f64).round() as usize;
    let mut removed: Vec<usize> = ascending(scores).into_iter().take(count).collect();
    removed.sort_unstable();
    Ok(removed)
}

/// Output-side pruning: filters ranked by squared norm under the same ratio
/// bound. Returns the kept filter indices.
pub fn prune_filters(w: &Tensor, beta: f64) -> Result<Vec<usize>> {
    if w.ndim() == 0 || w.numel() == 0 {
        return Err(Error::shape("prune_filters", format!("empty weight {:?}", w.shape())));
    }
    let per = w.numel() / w.dim(0);
    let norms: Vec<f64> = w.data().chunks(per).map(|f| f.iter().map(|v| v * v).sum()).collect();
    let (removed, _) = greedy_ratio_prune(&norms, beta)?;
    Ok((0..w.dim(0)).filter(|k| removed.binary_search(k).is_err()).collect())
}

// ---- structure ------------------------------------------------------------

/// One filter group after pruning. Indices refer to the unpruned layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStructure {
    /// Kept output filters, ascending.
    pub filters: Vec<usize>,
    /// Kept input channels, ascending.
    pub gather: Vec<usize>,
    /// Achieved `‖Q‖² / ‖G‖²` of the channel pruning step.
    pub ratio: f64,
}

impl GroupStructure {
    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }
}

/// Structure of one convolution. Ungrouped convolutions have a single group.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStructure {
    pub layer: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: Vec<GroupStructure>,
}

impl LayerStructure {
    /// Surviving output channels in group order: the channel order of the
    /// compiled layer.
    pub fn channel_order(&self) -> Vec<usize> {
        self.groups.iter().flat_map(|g| g.filters.iter().copied()).collect()
    }

    pub fn alive(&self) -> Vec<bool> {
        let mut alive = vec![false; self.out_channels];
        for g in &self.groups {
            for &k in &g.filters {
                alive[k] = true;
            }
        }
        alive
    }

    /// Input channels read by at least one group.
    pub fn used_inputs(&self) -> BTreeSet<usize> {
        self.groups.iter().flat_map(|g| g.gather.iter().copied()).collect()
    }
}

/// Rule that chose the removed channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Criterion {
    /// Removed energy below this fraction of each group's total.
    Ratio(f64),
    /// This fraction of each group's channels.
    Rate(f64),
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Criterion::Ratio(b) => write!(f, "beta {b}"),
            Criterion::Rate(r) => write!(f, "rate {r}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrunedStructure {
    pub criterion: Criterion,
    /// Every convolution of the network, in layer order.
    pub layers: Vec<LayerStructure>,
}

/// The convolution feeding each convolution's input, if any. Only
/// channel-preserving layers may sit in between.
pub fn conv_producers(spec: &NetworkSpec) -> Result<Vec<(usize, Option<usize>)>> {
    let mut out = Vec::new();
    let mut last: Option<usize> = None;
    for (i, l) in spec.layers.iter().enumerate() {
        match l {
            LayerSpec::Conv(_) => {
                out.push((i, last));
                last = Some(i);
            }
            LayerSpec::BatchNorm { .. } | LayerSpec::Relu | LayerSpec::MaxPool { .. } => {}
            LayerSpec::Flatten | LayerSpec::Linear { .. } => last = None,
        }
    }
    Ok(out)
}

impl PrunedStructure {
    /// Nothing removed; grouped layers keep their assignment, every group
    /// reads every input channel.
    pub fn identity(spec: &NetworkSpec, assignment: &GroupAssignment) -> Result<Self> {
        let none: Vec<(usize, Vec<Vec<usize>>)> = Vec::new();
        Self::from_removed(spec, assignment, &none, Criterion::Ratio(0.0), &[])
    }

    /// Builds the structure from per-group removed channel sets of the
    /// grouped layers, then eliminates dead filters.
    fn from_removed(
        spec: &NetworkSpec,
        assignment: &GroupAssignment,
        removed: &[(usize, Vec<Vec<usize>>)],
        criterion: Criterion,
        ratios: &[(usize, Vec<f64>)],
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for i in spec.conv_layers() {
            let s = spec.conv(i).unwrap();
            let (groups_of, n) = match assignment.layer(i) {
                Some(a) if s.grouped => {
                    if !a.is_partition(s.out_channels) {
                        return Err(Error::structure(i, None, "assignment does not cover every filter"));
                    }
                    (a.group_of_filter.clone(), a.groups)
                }
                _ => (vec![0; s.out_channels], 1),
            };
            let removed_here = removed.iter().find(|(l, _)| *l == i).map(|(_, r)| r);
            let ratio_here = ratios.iter().find(|(l, _)| *l == i).map(|(_, r)| r);
            let groups = (0..n)
                .map(|p| {
                    let filters: Vec<usize> = (0..s.out_channels).filter(|&k| groups_of[k] == p).collect();
                    let drop = removed_here.map(|r| r[p].as_slice()).unwrap_or(&[]);
                    let gather = (0..s.in_channels).filter(|m| drop.binary_search(m).is_err()).collect();
                    GroupStructure {
                        filters,
                        gather,
                        ratio: ratio_here.map(|r| r[p]).unwrap_or(0.0),
                    }
                })
                .collect();
            layers.push(LayerStructure {
                layer: i,
                in_channels: s.in_channels,
                out_channels: s.out_channels,
                groups,
            });
        }
        let mut structure = PrunedStructure { criterion, layers };
        structure.eliminate_dead(spec)?;
        Ok(structure)
    }

    /// Propagates removals to a fixpoint: groups without inputs lose their
    /// filters, unread channels lose their producing filter, and channels of
    /// removed filters leave every consumer's gather list.
    fn eliminate_dead(&mut self, spec: &NetworkSpec) -> Result<()> {
        let producers = conv_producers(spec)?;
        let pos = |layer: usize, layers: &[LayerStructure]| layers.iter().position(|l| l.layer == layer).unwrap();
        loop {
            let mut changed = false;
            for l in &mut self.layers {
                for g in &mut l.groups {
                    if g.gather.is_empty() && !g.filters.is_empty() {
                        g.filters.clear();
                        changed = true;
                    }
                }
            }
            for &(consumer, producer) in &producers {
                let Some(producer) = producer else { continue };
                let (ci, pi) = (pos(consumer, &self.layers), pos(producer, &self.layers));
                let alive = self.layers[pi].alive();
                for g in &mut self.layers[ci].groups {
                    let before = g.gather.len();
                    g.gather.retain(|&m| alive[m]);
                    changed |= g.gather.len() != before;
                }
                let used = self.layers[ci].used_inputs();
                for g in &mut self.layers[pi].groups {
                    let before = g.filters.len();
                    g.filters.retain(|k| used.contains(k));
                    changed |= g.filters.len() != before;
                }
            }
            if !changed {
                break;
            }
        }
        for l in &self.layers {
            if l.groups.iter().all(GroupStructure::is_empty) {
                return Err(Error::structure(l.layer, None, "pruning removed every filter"));
            }
        }
        Ok(())
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerStructure> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Masked-dense view of the structure.
    pub fn mask(&self, net: &Network) -> Result<NetworkMask> {
        let mut conv = vec![None; net.spec.layers.len()];
        for l in &self.layers {
            let w = net
                .conv_weight(l.layer)
                .ok_or_else(|| Error::structure(l.layer, None, "not a convolution in this network"))?;
            if w.dim(0) != l.out_channels || w.dim(1) != l.in_channels {
                return Err(Error::structure(l.layer, None, format!("weight {:?} does not match structure", w.shape())));
            }
            let area = w.dim(2) * w.dim(3);
            let mut m = Tensor::zeros(w.shape());
            for g in &l.groups {
                for &k in &g.filters {
                    for &c in &g.gather {
                        let start = (k * l.in_channels + c) * area;
                        m.data_mut()[start..start + area].fill(1.0);
                    }
                }
            }
            conv[l.layer] = Some(ConvMask {
                weight: m,
                alive: l.alive(),
            });
        }
        Ok(NetworkMask { conv })
    }

    /// Human-readable per-layer summary.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "criterion: {}", self.criterion);
        for l in &self.layers {
            let alive = l.alive().iter().filter(|&&a| a).count();
            let _ = writeln!(
                s,
                "\nlayer {}: {} -> {} filters kept, {} input channels",
                l.layer, l.out_channels, alive, l.in_channels
            );
            for (p, g) in l.groups.iter().enumerate() {
                if g.is_empty() {
                    let _ = writeln!(s, "  group {p}: empty (dropped)");
                    continue;
                }
                let _ = writeln!(
                    s,
                    "  group {p}: filters {:?}, gather {:?} ({}/{} channels), pruned energy ratio {:.4}",
                    g.filters,
                    g.gather,
                    g.gather.len(),
                    l.in_channels,
                    g.ratio
                );
            }
        }
        s
    }

    /// Line-oriented machine-readable form, read back by [`PrunedStructure::parse`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::from("structure 1\n");
        let _ = writeln!(s, "{}", self.criterion);
        for l in &self.layers {
            let _ = writeln!(s, "layer {} in {} out {} groups {}", l.layer, l.in_channels, l.out_channels, l.groups.len());
            for g in &l.groups {
                let _ = writeln!(s, "group ratio {} filters {} gather {}", g.ratio, list(&g.filters), list(&g.gather));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Data(format!("structure line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, "structure 1")) => {}
            _ => return Err(bad(0, "expected header `structure 1`")),
        }
        let (n, crit_line) = lines.next().ok_or_else(|| bad(1, "missing criterion"))?;
        let criterion = match crit_line.split_once(' ') {
            Some(("beta", v)) => v.parse().ok().map(Criterion::Ratio),
            Some(("rate", v)) => v.parse().ok().map(Criterion::Rate),
            _ => None,
        }
        .ok_or_else(|| bad(n, "expected `beta <value>` or `rate <value>`"))?;
        let num = |n: usize, s: &str| s.parse::<usize>().map_err(|_| bad(n, &format!("bad number {s:?}")));
        let nums = |n: usize, s: &str| -> Result<Vec<usize>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',').map(|x| num(n, x)).collect()
        };
        let mut layers: Vec<LayerStructure> = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.split(' ').collect();
            match f.as_slice() {
                ["layer", layer, "in", cin, "out", cout, "groups", _] => layers.push(LayerStructure {
                    layer: num(n, layer)?,
                    in_channels: num(n, cin)?,
                    out_channels: num(n, cout)?,
                    groups: Vec::new(),
                }),
                ["group", "ratio", r, "filters", filters, "gather", gather] => {
                    let l = layers.last_mut().ok_or_else(|| bad(n, "group before any layer"))?;
                    l.groups.push(GroupStructure {
                        filters: nums(n, filters)?,
                        gather: nums(n, gather)?,
                        ratio: r.parse().map_err(|_| bad(n, "bad ratio"))?,
                    });
                }
                ["group", "ratio", r, "filters", "gather", gather] => {
                    let l = layers.last_mut().ok_or_else(|| bad(n, "group before any layer"))?;
                    l.groups.push(GroupStructure {
                        filters: Vec::new(),
                        gather: nums(n, gather)?,
                        ratio: r.parse().map_err(|_| bad(n, "bad ratio"))?,
                    });
                }
                _ => return Err(bad(n, "unrecognized line")),
            }
        }
        Ok(PrunedStructure { criterion, layers })
    }

    /// Checks the structure against a network: layers, index ranges,
    /// ordering, and the filter partition.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let convs = spec.conv_layers();
        if convs != self.layers.iter().map(|l| l.layer).collect::<Vec<_>>() {
            return Err(Error::structure(0, None, format!("structure layers do not match convolutions {convs:?}")));
        }
        for l in &self.layers {
            let s = spec.conv(l.layer).unwrap();
            if (s.in_channels, s.out_channels) != (l.in_channels, l.out_channels) {
                return Err(Error::structure(l.layer, None, "channel counts differ from the network"));
            }
            let mut seen = vec![false; l.out_channels];
            for (p, g) in l.groups.iter().enumerate() {
                let strictly_increasing = |v: &[usize], bound: usize| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&x| x < bound);
                if !strictly_increasing(&g.filters, l.out_channels) || !strictly_increasing(&g.gather, l.in_channels) {
                    return Err(Error::structure(l.layer, Some(p), "indices out of range or not strictly increasing"));
                }
                for &k in &g.filters {
                    if std::mem::replace(&mut seen[k], true) {
                        return Err(Error::structure(l.layer, Some(p), format!("filter {k} in two groups")));
                    }
                }
                if !g.filters.is_empty() && g.gather.is_empty() {
                    return Err(Error::structure(l.layer, Some(p), "group has filters but no inputs"));
                }
            }
        }
        Ok(())
    }
}

/// Prunes every grouped layer of `net` by the ratio criterion.
pub fn prune(net: &Network, assignment: &GroupAssignment, beta: f64) -> Result<PrunedStructure> {
    check_beta(beta)?;
    let mut removed = Vec::new();
    let mut ratios = Vec::new();
    for a in &assignment.layers {
        let w = net
            .conv_weight(a.layer)
            .ok_or_else(|| Error::structure(a.layer, None, "assignment for a non-convolution layer"))?;
        let scores = compute_importance(w, a)?;
        let mut r = Vec::new();
        let mut q = Vec::new();
        for s in &scores {
            let (set, ratio) = greedy_ratio_prune(s, beta)?;
            r.push(set);
            q.push(ratio);
        }
        removed.push((a.layer, r));
        ratios.push((a.layer, q));
    }
    PrunedStructure::from_removed(&net.spec, assignment, &removed, Criterion::Ratio(beta), &ratios)
}

/// Fixed-rate variant: every group drops `round(rate · C_in)` of its
/// lowest-importance channels.
pub fn prune_fixed_rate(net: &Network, assignment: &GroupAssignment, rate: f64) -> Result<PrunedStructure> {
    let mut removed = Vec::new();
    let mut ratios = Vec::new();
    for a in &assignment.layers {
        let w = net
            .conv_weight(a.layer)
            .ok_or_else(|| Error::structure(a.layer, None, "assignment for a non-convolution layer"))?;
        let scores = compute_importance(w, a)?;
        let mut r = Vec::new();
        let mut q = Vec::new();
        for s in &scores {
            let set = lowest_fraction(s, rate)?;
            let total: f64 = s.iter().sum();
            let part: f64 = set.iter().map(|&i| s[i]).sum();
            q.push(if total > 0.0 { part / total } else { 0.0 });
            r.push(set);
        }
        removed.push((a.layer, r));
        ratios.push((a.layer, q));
    }
    PrunedStructure::from_removed(&net.spec, assignment, &removed, Criterion::Rate(rate), &ratios)
}
