//! Brute-force reference points: every filter partition of a small layer,
//! evaluated at fixed pruning rates without fine-tuning, and a plain
//! input-channel pruning baseline that shares no code with the grouped path.

use std::fmt::Write as _;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{LayerSpec, Mode, Network};
use crate::pruning::{
    conv_producers, prune_fixed_rate, Criterion, GroupAssignment, GroupStructure, LayerAssignment, LayerStructure,
    PrunedStructure,
};
use crate::tensor::{Tape, Tensor};
use crate::train::EVAL_CHUNK;

/// Enumeration refuses layers wider than this.
pub const MAX_ENUMERATED_FILTERS: usize = 12;

/// Every partition of `filters` filters into at most `groups` nonempty
/// groups, one representative per relabeling class: restricted-growth
/// strings (filter 0 in group 0, each new group label one above the largest
/// so far), in lexicographic order.
pub fn enumerate_partitions(filters: usize, groups: usize) -> Result<Vec<Vec<usize>>> {
    if filters > MAX_ENUMERATED_FILTERS {
        return Err(Error::Capacity(format!(
            "{filters} filters exceed the enumeration limit of {MAX_ENUMERATED_FILTERS}"
        )));
    }
    if groups == 0 {
        return Err(Error::Config("groups must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut labels = vec![0usize; filters];
    fn extend(at: usize, max_label: usize, groups: usize, labels: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if at == labels.len() {
            out.push(labels.clone());
            return;
        }
        let top = (max_label + 1).min(groups - 1);
        for g in 0..=top {
            labels[at] = g;
            extend(at + 1, max_label.max(g), groups, labels, out);
        }
    }
    if filters == 0 {
        return Ok(vec![Vec::new()]);
    }
    extend(1, 0, groups, &mut labels, &mut out);
    Ok(out)
}

/// Relabels groups in order of first appearance, giving the representative
/// used by [`enumerate_partitions`].
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    labels
        .iter()
        .map(|&l| match map.iter().find(|(from, _)| *from == l) {
            Some(&(_, to)) => to,
            None => {
                map.push((l, map.len()));
                map.len() - 1
            }
        })
        .collect()
}

/// Brackets-and-commas rendering, e.g. `[0,1,4][2,3]`. Empty groups are
/// omitted.
pub fn format_partition(labels: &[usize]) -> String {
    let groups = labels.iter().max().map_or(0, |m| m + 1);
    (0..groups)
        .map(|p| {
            let members: Vec<String> = (0..labels.len()).filter(|&k| labels[k] == p).map(|k| k.to_string()).collect();
            format!("[{}]", members.join(","))
        })
        .filter(|s| s != "[]")
        .collect()
}

/// Validation accuracy of one network over many structures, reusing the
/// activations that feed the grouped layer. Those activations do not depend
/// on the partition: a producer channel can only die when no group reads it,
/// in which case its value is multiplied by zero either way.
pub struct PartitionEvaluator<'a> {
    net: &'a Network,
    layer: usize,
    /// Cached `(inputs to layer, labels)` per evaluation chunk.
    chunks: Vec<(Tensor, Vec<usize>)>,
}

impl<'a> PartitionEvaluator<'a> {
    pub fn new(net: &'a Network, layer: usize, split: &Split) -> Result<Self> {
        if !matches!(net.spec.layers.get(layer), Some(LayerSpec::Conv(_))) {
            return Err(Error::structure(layer, None, "not a convolution"));
        }
        let idx: Vec<usize> = (0..split.len()).collect();
        let mut chunks = Vec::new();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (x, y) = split.batch(chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let pv = net.bind(&mut tape, false);
            let out = net.forward_range(&mut tape, xv, &pv, Mode::Eval, None, 0..layer)?;
            chunks.push((tape.value(out.logits).clone(), y));
        }
        Ok(PartitionEvaluator { net, layer, chunks })
    }

    pub fn unpruned_accuracy(&self) -> Result<f64> {
        self.accuracy_with(None)
    }

    /// Accuracy in percent under `structure`.
    pub fn accuracy(&self, structure: &PrunedStructure) -> Result<f64> {
        self.accuracy_with(Some(structure))
    }

    fn accuracy_with(&self, structure: Option<&PrunedStructure>) -> Result<f64> {
        let mask = structure.map(|s| s.mask(self.net)).transpose()?;
        let (mut correct, mut total) = (0usize, 0usize);
        for (x, y) in &self.chunks {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let pv = self.net.bind(&mut tape, false);
            let out = self.net.forward_range(
                &mut tape,
                xv,
                &pv,
                Mode::Eval,
                mask.as_ref(),
                self.layer..self.net.spec.layers.len(),
            )?;
            let pred = tape.value(out.logits).argmax_rows();
            correct += pred.iter().zip(y).filter(|(p, t)| p == t).count();
            total += y.len();
        }
        Ok(if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 })
    }
}

/// Validation accuracy, without fine-tuning, after fixed-rate pruning of
/// `net` under a single-layer assignment.
pub fn evaluate_partition(net: &Network, assignment: &LayerAssignment, rate: f64, split: &Split) -> Result<f64> {
    let eval = PartitionEvaluator::new(net, assignment.layer, split)?;
    let s = prune_fixed_rate(
        net,
        &GroupAssignment {
            layers: vec![assignment.clone()],
        },
        rate,
    )?;
    eval.accuracy(&s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionRecord {
    pub partition: Vec<usize>,
    pub rate: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateSummary {
    pub rate: f64,
    pub best: PartitionRecord,
    pub worst: PartitionRecord,
    pub average: f64,
    /// Accuracy of the supplied learned partition, if any.
    pub learned: Option<PartitionRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteForceReport {
    pub layer: usize,
    pub groups: usize,
    pub unpruned_accuracy: f64,
    pub records: Vec<PartitionRecord>,
    pub summaries: Vec<RateSummary>,
}

/// Evaluates every partition of `layer` at every rate, in canonical
/// partition order. `learned` is evaluated as well, after canonical
/// relabeling. `on_record` sees each record as it completes.
pub fn brute_force(
    net: &Network,
    layer: usize,
    groups: usize,
    rates: &[f64],
    split: &Split,
    learned: Option<&[usize]>,
    mut on_record: impl FnMut(&PartitionRecord),
) -> Result<BruteForceReport> {
    let filters = net
        .spec
        .conv(layer)
        .ok_or_else(|| Error::structure(layer, None, "not a convolution"))?
        .out_channels;
    let partitions = enumerate_partitions(filters, groups)?;
    let eval = PartitionEvaluator::new(net, layer, split)?;
    let run = |labels: &[usize], rate: f64| -> Result<PartitionRecord> {
        let a = GroupAssignment {
            layers: vec![LayerAssignment::new(layer, groups, labels.to_vec())?],
        };
        // A structure error means every filter died; score it as chance-free 0.
        let accuracy = match prune_fixed_rate(net, &a, rate) {
            Ok(s) => eval.accuracy(&s)?,
            Err(Error::Structure { .. }) => 0.0,
            Err(e) => return Err(e),
        };
        Ok(PartitionRecord {
            partition: labels.to_vec(),
            rate,
            accuracy,
        })
    };
    let mut records = Vec::with_capacity(partitions.len() * rates.len());
    let mut summaries = Vec::with_capacity(rates.len());
    for &rate in rates {
        let start = records.len();
        for p in &partitions {
            let r = run(p, rate)?;
            on_record(&r);
            records.push(r);
        }
        let these = &records[start..];
        // first occurrence wins ties, so results follow canonical order
        let best = these.iter().fold(&these[0], |b, r| if r.accuracy > b.accuracy { r } else { b });
        let worst = these.iter().fold(&these[0], |b, r| if r.accuracy < b.accuracy { r } else { b });
        let average = these.iter().map(|r| r.accuracy).sum::<f64>() / these.len() as f64;
        let learned = learned.map(|l| run(&canonical_labels(l), rate)).transpose()?;
        summaries.push(RateSummary {
            rate,
            best: best.clone(),
            worst: worst.clone(),
            average,
            learned,
        });
    }
    Ok(BruteForceReport {
        layer,
        groups,
        unpruned_accuracy: eval.unpruned_accuracy()?,
        records,
        summaries,
    })
}

impl BruteForceReport {
    /// `partition,rate,accuracy` rows followed by best/worst/average (and
    /// learned) rows per rate.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("partition,rate,accuracy\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:.4}", format_partition(&r.partition), r.rate, r.accuracy);
        }
        for m in &self.summaries {
            let _ = writeln!(s, "best {},{},{:.4}", format_partition(&m.best.partition), m.rate, m.best.accuracy);
            let _ = writeln!(s, "worst {},{},{:.4}", format_partition(&m.worst.partition), m.rate, m.worst.accuracy);
            let _ = writeln!(s, "average,{},{:.4}", m.rate, m.average);
            if let Some(l) = &m.learned {
                let _ = writeln!(s, "learned {},{},{:.4}", format_partition(&l.partition), m.rate, l.accuracy);
            }
        }
        s
    }

    /// Table-style summary.
    pub fn table(&self) -> String {
        let mut s = format!(
            "layer {}, {} groups, {} partitions, unpruned accuracy {:.2}\n",
            self.layer,
            self.groups,
            self.records.len() / self.summaries.len().max(1),
            self.unpruned_accuracy
        );
        let _ = writeln!(s, "{:<8}{:>10}{:>10}{:>10}{:>10}", "rate", "best", "worst", "average", "learned");
        for m in &self.summaries {
            let learned = m.learned.as_ref().map_or("-".to_string(), |l| format!("{:.2}", l.accuracy));
            let _ = writeln!(
                s,
                "{:<8}{:>10.2}{:>10.2}{:>10.2}{:>10}",
                m.rate, m.best.accuracy, m.worst.accuracy, m.average, learned
            );
        }
        for m in &self.summaries {
            let _ = writeln!(
                s,
                "rate {}: best {} worst {}",
                m.rate,
                format_partition(&m.best.partition),
                format_partition(&m.worst.partition)
            );
        }
        s
    }
}

/// How the baseline chooses channels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineRule {
    Ratio(f64),
    Rate(f64),
}

/// Classic input-channel pruning of every grouped layer: channels ranked by
/// the squared norm of their whole slice across all filters, removed in
/// ascending order under `rule`. Filters of the producing layer whose
/// channel is no longer read are removed as well.
pub fn channel_prune_baseline(net: &Network, rule: BaselineRule) -> Result<PrunedStructure> {
    let criterion = match rule {
        BaselineRule::Ratio(b) if (0.0..1.0).contains(&b) => Criterion::Ratio(b),
        BaselineRule::Rate(r) if (0.0..=1.0).contains(&r) => Criterion::Rate(r),
        other => return Err(Error::Config(format!("baseline parameter out of range: {other:?}"))),
    };
    let mut layers: Vec<LayerStructure> = net
        .spec
        .conv_layers()
        .into_iter()
        .map(|i| {
            let s = net.spec.conv(i).unwrap();
            LayerStructure {
                layer: i,
                in_channels: s.in_channels,
                out_channels: s.out_channels,
                groups: vec![GroupStructure {
                    filters: (0..s.out_channels).collect(),
                    gather: (0..s.in_channels).collect(),
                    ratio: 0.0,
                }],
            }
        })
        .collect();
    for layer in net.spec.grouped_layers() {
        let w = net.conv_weight(layer).unwrap();
        let (cout, cin, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let mut norms = vec![0.0; cin];
        for k in 0..cout {
            for (m, norm) in norms.iter_mut().enumerate() {
                let mut filter_part = 0.0;
                for i in 0..kh * kw {
                    let v = w.data()[(k * cin + m) * kh * kw + i];
                    filter_part += v * v;
                }
                *norm += filter_part;
            }
        }
        let total: f64 = norms.iter().sum();
        let mut ranked: Vec<(f64, usize)> = norms.iter().copied().zip(0..).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ratio_of = |q: f64| if total > 0.0 { q / total } else { 0.0 };
        let mut drop = vec![false; cin];
        let mut removed = 0.0;
        match rule {
            BaselineRule::Ratio(beta) => {
                for &(n, m) in &ranked {
                    if ratio_of(removed + n) >= beta {
                        break;
                    }
                    removed += n;
                    drop[m] = true;
                }
            }
            BaselineRule::Rate(rate) => {
                let count = (rate * cin as f64).round() as usize;
                for &(_, m) in ranked.iter().take(count) {
                    drop[m] = true;
                }
                removed = (0..cin).filter(|&m| drop[m]).map(|m| norms[m]).sum();
            }
        }
        let l = layers.iter_mut().find(|l| l.layer == layer).unwrap();
        let g = &mut l.groups[0];
        g.gather.retain(|&m| !drop[m]);
        g.ratio = ratio_of(removed);
        if g.gather.is_empty() {
            return Err(Error::structure(layer, None, "pruning removed every filter"));
        }
    }
    // A channel no consumer reads takes its producing filter with it.
    for (consumer, producer) in conv_producers(&net.spec)? {
        let Some(producer) = producer else { continue };
        let read: Vec<usize> = layers.iter().find(|l| l.layer == consumer).unwrap().groups[0].gather.clone();
        let p = layers.iter_mut().find(|l| l.layer == producer).unwrap();
        p.groups[0].filters.retain(|k| read.contains(k));
    }
    Ok(PrunedStructure { criterion, layers })
}
