//! Loss, optimizer, schedule and the per-epoch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backward::{network_backward, NetworkGrads};
use super::forward::network_forward;
use super::{NetworkConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::mat::Mat;

/// Training hyperparameters: SGD with momentum 0.9, weight decay 1e-4, and
/// a step schedule decaying the rate by 0.1 every 25 epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub total_epochs: usize,
    pub seed: u64,
    /// Weight each point's loss by the inverse frequency of its class over
    /// the dataset. Off by default.
    pub class_weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.05,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 0.0001,
            decay_factor: 0.1,
            decay_every: 25,
            total_epochs: 100,
            seed: 0,
            class_weighted: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning hyperparameters must be non-negative".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if self.batch_size < 1 || self.decay_every < 1 || self.total_epochs < 1 {
            return Err(Error::Config("counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter momentum buffers, initialized to zero, in the canonical
/// tensor order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    bufs: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        OptimizerState { bufs: params.slices().iter().map(|s| vec![0.0; s.len()]).collect() }
    }
}

/// Mean cross entropy with max-stabilized log-softmax; also returns the
/// gradient (softmax - onehot) / n_points.
pub fn cross_entropy_loss(logits: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    weighted_cross_entropy_loss(logits, labels, None)
}

/// Cross entropy with optional per-class weights: each point contributes
/// w_label * (-log softmax), normalized by the total weight. `None` weights
/// reduce to the plain mean.
pub fn weighted_cross_entropy_loss(
    logits: &Mat,
    labels: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<(f64, Mat)> {
    let n = logits.rows();
    if labels.len() != n {
        return Err(Error::invalid("cross_entropy_loss: label count != logit rows"));
    }
    let classes = logits.cols();
    if let Some(w) = class_weights {
        if w.len() != classes {
            return Err(Error::invalid("cross_entropy_loss: weight count != class count"));
        }
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::invalid("cross_entropy_loss: weights must be finite and >= 0"));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range [0, {classes})")));
    }
    let weight_of = |label: usize| class_weights.map_or(1.0, |w| w[label]);
    let total_weight: f64 = labels.iter().map(|&l| weight_of(l)).sum();
    if !(total_weight > 0.0) {
        return Err(Error::invalid("cross_entropy_loss: total weight is zero"));
    }
    let mut loss = 0.0;
    let mut grad = Mat::zeros(n, classes);
    let inv_total = 1.0 / total_weight;
    for i in 0..n {
        let label = labels[i];
        let wi = weight_of(label);
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        loss += -wi * (row[label] - max - log_denom);
        let grow = grad.row_mut(i);
        for c in 0..classes {
            let p = (row[c] - max).exp() / denom;
            grow[c] = wi * (p - if c == label { 1.0 } else { 0.0 }) * inv_total;
        }
    }
    Ok((loss * inv_total, grad))
}

/// Inverse-frequency class weights over a block set, normalized to mean 1
/// over the classes that occur. Absent classes get weight 0.
pub fn inverse_frequency_weights(blocks: &[PointCloud], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    for b in blocks {
        if let Some(ref labels) = b.labels {
            for &l in labels {
                counts[l] += 1;
            }
        }
    }
    let mut weights: Vec<f64> =
        counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
    let present = weights.iter().filter(|&&w| w > 0.0).count().max(1);
    let mean: f64 = weights.iter().sum::<f64>() / present as f64;
    if mean > 0.0 {
        for w in weights.iter_mut() {
            *w /= mean;
        }
    }
    weights
}

/// base_lr * decay_factor^floor(epoch / decay_every).
pub fn lr_schedule(epoch: usize, tc: &TrainConfig) -> f64 {
    tc.base_lr * tc.decay_factor.powi((epoch / tc.decay_every) as i32)
}

/// One SGD-with-momentum step:
/// g' = grad + weight_decay * param; buf = momentum * buf + g';
/// param -= lr * buf.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &NetworkGrads,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut p = params.slices_mut();
    let g = grads.slices();
    if p.len() != g.len() || p.len() != state.bufs.len() {
        return Err(Error::invalid("sgd_step: tensor counts disagree"));
    }
    for ((ps, gs), bs) in p.iter_mut().zip(g).zip(state.bufs.iter_mut()) {
        if ps.len() != gs.len() || ps.len() != bs.len() {
            return Err(Error::invalid("sgd_step: tensor shapes disagree"));
        }
        for i in 0..ps.len() {
            let gp = gs[i] + weight_decay * ps[i];
            bs[i] = momentum * bs[i] + gp;
            ps[i] -= lr * bs[i];
        }
    }
    Ok(())
}

/// Statistics of one training epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Overall accuracy of the epoch's own (pre-update) predictions.
    pub oa: f64,
    pub lr: f64,
    /// Order-sensitive digest of the shuffled block order.
    pub shuffle_hash: u64,
}

/// Train one epoch over the block dataset: deterministic shuffle by
/// (seed, epoch), batches of `batch_size` blocks, gradients averaged over
/// each batch in ascending shuffle position.
pub fn train_epoch(
    blocks: &[PointCloud],
    config: &NetworkConfig,
    tc: &TrainConfig,
    params: &mut NetworkParams,
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<EpochStats> {
    if blocks.is_empty() {
        return Err(Error::degenerate("train_epoch: empty dataset"));
    }
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    let shuffle_hash = fnv1a(&order);

    let weights = tc
        .class_weighted
        .then(|| inverse_frequency_weights(blocks, config.num_classes));
    let lr = lr_schedule(epoch, tc);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in order.chunks(tc.batch_size) {
        let mut batch_grads: Option<NetworkGrads> = None;
        for &bi in batch {
            let block = &blocks[bi];
            let labels = block
                .labels
                .as_ref()
                .ok_or_else(|| Error::invalid("train_epoch: block without labels"))?;
            let (logits, tape) = network_forward(block, config, params, true)?;
            let (loss, d_logits) =
                weighted_cross_entropy_loss(&logits, labels, weights.as_deref())?;
            loss_sum += loss;
            for i in 0..logits.rows() {
                let row = logits.row(i);
                let pred = argmax_row(row);
                if pred == labels[i] {
                    correct += 1;
                }
                total += 1;
            }
            let grads = network_backward(&tape.unwrap(), config, params, &d_logits)?;
            match batch_grads.as_mut() {
                None => batch_grads = Some(grads),
                Some(acc) => acc.add_assign(&grads),
            }
        }
        let mut grads = batch_grads.unwrap();
        grads.scale(1.0 / batch.len() as f64);
        sgd_step(params, &grads, state, lr, tc.momentum, tc.weight_decay)?;
    }

    Ok(EpochStats {
        mean_loss: loss_sum / blocks.len() as f64,
        oa: correct as f64 / total as f64,
        lr,
        shuffle_hash,
    })
}

/// Index of the largest entry; earlier index wins ties.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn fnv1a(order: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &v in order {
        for b in (v as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
