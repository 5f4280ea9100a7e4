//! Stage 1: bit-plane feature consistency fine-tuning.
//!
//! Each input is perturbed with small uniform noise, rounded back to integer
//! pixel levels and stripped of its `k` low bit planes. The loss keeps the
//! pre-softmax features of the original and stripped inputs close while
//! cross-entropy is taken on the original input.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{sgd_step, Tape, Var};
use crate::data::{one_hot, Dataset};
use crate::error::{contract_err, Result};
use crate::model::BoundParams;
use crate::model::Model;
use crate::rng::{derive_seed, rng_from, stream};
use crate::tensor::Tensor;
use crate::train::{check_loss, epoch_batches};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpfcConfig {
    /// Number of low bit planes removed, in `1..=7`.
    pub lsb_bits: u32,
    pub consistency_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BpfcConfig {
    fn default() -> Self {
        Self {
            lsb_bits: 4,
            consistency_weight: 1.0,
            epochs: 5,
            lr: 0.02,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl BpfcConfig {
    pub fn validate(&self) -> Result<()> {
        check_k(self.lsb_bits)?;
        if !(self.consistency_weight >= 0.0) {
            return Err(contract_err!("consistency weight must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(contract_err!("batch size must be positive"));
        }
        Ok(())
    }
}

fn check_k(k: u32) -> Result<()> {
    if (1..=7).contains(&k) {
        Ok(())
    } else {
        Err(contract_err!("lsb bit count k={} outside [1,7]", k))
    }
}

/// Half-width of the pre-removal noise, `2^(k-2)` levels.
pub fn noise_half_width(k: u32) -> f64 {
    libm::ldexp(1.0, k as i32 - 2)
}

/// Noise and bit removal on one integer pixel level, given a noise draw.
/// Returns `(pre, quantized)` levels.
pub fn strip_level(level: f64, noise: f64, k: u32) -> (f64, f64) {
    let pre = libm::round(level + noise).clamp(0.0, 255.0);
    let step = f64::from(1u32 << k);
    (pre, pre - libm::fmod(pre, step))
}

/// Returns `(x_pre, x_q)` for an input in `[0,1]` scale. Noise is uniform in
/// `[-2^(k-2), 2^(k-2))` levels per pixel, the noisy level is rounded and
/// clamped to `[0,255]`, then its `k` low bits are cleared.
pub fn bpfc_transform(x: &Tensor, k: u32, seed: u64) -> Result<(Tensor, Tensor)> {
    check_k(k)?;
    let half = noise_half_width(k);
    let mut rng = rng_from(seed);
    let mut pre = Vec::with_capacity(x.len());
    let mut quant = Vec::with_capacity(x.len());
    for &v in x.data() {
        let level = libm::round(v * 255.0);
        let noise = rng.random_range(-half..half);
        let (p, q) = strip_level(level, noise, k);
        pre.push(p / 255.0);
        quant.push(q / 255.0);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), pre)?,
        Tensor::new(x.shape().to_vec(), quant)?,
    ))
}

/// Terms of one BPFC loss evaluation recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BpfcTerms {
    pub total: Var,
    pub ce: f64,
    /// Mean squared feature distance, before weighting.
    pub consistency: f64,
}

/// Records `CE(f(x), y) + weight * mean_i ||g(x_i) - g(x_q_i)||^2`.
#[allow(clippy::too_many_arguments)]
pub fn bpfc_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &BoundParams,
    x: &Tensor,
    labels: &[usize],
    k: u32,
    weight: f64,
    noise_seed: u64,
) -> Result<BpfcTerms> {
    let xv = tape.constant(x.clone());
    let logits = model.forward_bound(tape, bound, xv)?;
    let ce = tape.cross_entropy(logits, &one_hot(labels, model.num_classes()))?;
    let ce_value = tape.value(ce).data()[0];
    if weight == 0.0 {
        return Ok(BpfcTerms {
            total: ce,
            ce: ce_value,
            consistency: 0.0,
        });
    }
    let (_, xq) = bpfc_transform(x, k, noise_seed)?;
    let xqv = tape.constant(xq);
    let logits_q = model.forward_bound(tape, bound, xqv)?;
    let cons = feature_distance(tape, logits, logits_q, labels.len())?;
    let cons_value = tape.value(cons).data()[0];
    let weighted = tape.scale(cons, weight);
    let total = tape.add(ce, weighted)?;
    Ok(BpfcTerms {
        total,
        ce: ce_value,
        consistency: cons_value,
    })
}

/// `(1/B) * sum_i ||a_i - b_i||^2` over a batch of feature rows.
pub fn feature_distance(tape: &mut Tape, a: Var, b: Var, batch: usize) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.sum_squares(diff);
    Ok(tape.scale(sq, 1.0 / batch.max(1) as f64))
}

/// Mean feature distance between `x` and its bit-stripped copy.
pub fn mean_consistency(model: &Model, ds: &Dataset, k: u32, seed: u64) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for (c, chunk) in idx.chunks(256).enumerate() {
        let x = ds.batch(chunk)?;
        let (_, xq) = bpfc_transform(&x, k, derive_seed(seed, c as u64))?;
        let a = model.forward(&x)?;
        let b = model.forward(&xq)?;
        total += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>();
    }
    Ok(total / ds.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpfcEpoch {
    pub epoch: usize,
    pub ce: f64,
    /// `consistency_weight * consistency`, the regularizer's contribution.
    pub weighted_consistency: f64,
    pub total: f64,
}

/// Stage 1. Minimizes the BPFC loss over `cfg.epochs` epochs of `ds`.
pub fn train_bpfc(model: &mut Model, ds: &Dataset, cfg: &BpfcConfig) -> Result<Vec<BpfcEpoch>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(contract_err!("train_bpfc needs a non-empty dataset"));
    }
    let noise_seed = stream(cfg.seed, "bpfc-noise");
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut ce_sum, mut cons_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (b, idx) in epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let x = ds.batch(idx)?;
            let labels = ds.batch_labels(idx);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let terms = bpfc_loss(
                model,
                &mut tape,
                &bound,
                &x,
                &labels,
                cfg.lsb_bits,
                cfg.consistency_weight,
                derive_seed(noise_seed, derive_seed(epoch as u64, b as u64)),
            )?;
            let total = tape.value(terms.total).data()[0];
            check_loss("stage1", epoch, total)?;
            let w = idx.len() as f64;
            ce_sum += terms.ce * w;
            cons_sum += cfg.consistency_weight * terms.consistency * w;
            total_sum += total * w;
            let grads = tape.backward(terms.total)?;
            model.store_grads(&bound, &grads)?;
            sgd_step(model.params_mut(), cfg.lr)?;
        }
        let n = ds.len() as f64;
        history.push(BpfcEpoch {
            epoch,
            ce: ce_sum / n,
            weighted_consistency: cons_sum / n,
            total: total_sum / n,
        });
    }
    Ok(history)
}
