//! Shared pieces of the training loops: loss/gradient evaluation, accuracy,
//! and the learning-rate schedule.

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{Mode, Network, NetworkMask};
use crate::tensor::{BatchStats, Tape, Tensor};

/// Evaluation batches are processed in chunks of this many samples.
pub const EVAL_CHUNK: usize = 500;

/// Training-mode loss at the current weights and its gradients.
pub struct LossGrads {
    pub loss: f64,
    /// One entry per trainable tensor, in [`Network::trainable`] order.
    /// `None` for tensors that were excluded from differentiation.
    pub grads: Vec<Option<Tensor>>,
    pub batch_stats: Vec<(usize, BatchStats)>,
}

/// Mean cross-entropy of `net` on `(x, y)` in training mode, with gradients
/// for the trainable tensors of layers `first_layer..`. Running statistics
/// are not touched; the caller decides whether to apply `batch_stats`.
pub fn loss_and_grads(
    net: &Network,
    x: &Tensor,
    y: &[usize],
    mask: Option<&NetworkMask>,
    first_layer: usize,
) -> Result<LossGrads> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = net.bind_with(&mut tape, |i| i >= first_layer);
    let out = net.forward_tape(&mut tape, xv, &pv, Mode::Train, mask)?;
    let loss_var = tape.softmax_cross_entropy(out.logits, y)?;
    let loss = tape.value(loss_var).item();
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("training loss became {loss}")));
    }
    tape.backward(loss_var)?;
    let grads = pv
        .layers
        .iter()
        .enumerate()
        .flat_map(|(i, vars)| vars.iter().map(move |&v| (i, v)))
        .map(|(i, v)| {
            if i < first_layer {
                return None;
            }
            let shape = tape.value(v).shape().to_vec();
            Some(tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(&shape)))
        })
        .collect();
    Ok(LossGrads {
        loss,
        grads,
        batch_stats: out.batch_stats,
    })
}

/// Top-1 accuracy in percent, evaluated in eval mode.
pub fn accuracy(net: &Network, split: &Split, mask: Option<&NetworkMask>) -> Result<f64> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = split.batch(chunk);
        let logits = net.logits(&x, mask)?;
        correct += logits.argmax_rows().iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

/// Exponentially decayed rate for a zero-based epoch.
pub fn decayed_lr(initial: f64, decay: f64, epoch: usize) -> f64 {
    initial * decay.powi(epoch as i32)
}

/// Minibatches of one epoch. A trailing batch with fewer than two samples is
/// dropped, since batch statistics need at least two.
pub fn minibatches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size.max(1)).filter(|c| c.len() >= 2)
}
