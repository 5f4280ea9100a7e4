//! Minibatch plumbing shared by the training stages, plus Stage 0 clean
//! mixup training.

use alloc::vec::Vec;

use crate::autodiff::{sgd_step, Tape};
use crate::data::{mixup_batch, one_hot, permutation, Dataset};
use crate::error::{contract_err, Error, Result};
use crate::model::Model;
use crate::rng::{derive_seed, stream};

/// Fraction of the training set held out for validation in Stage 0.
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleanConfig {
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

/// Shuffled minibatch index lists for one epoch. Every stage draws its
/// order from the same named stream so that stages with the same seed
/// visit samples identically.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = permutation(n, derive_seed(stream(seed, "shuffle"), epoch as u64));
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

pub(crate) fn check_loss(stage: &'static str, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { stage, epoch })
    }
}

/// Stage 0: mixup cross-entropy training. The trailing 10% of `ds` is held
/// out and scored after every epoch.
pub fn train_clean(
    model: &mut Model,
    ds: &Dataset,
    cfg: &CleanConfig,
) -> Result<Vec<EpochMetrics>> {
    if ds.is_empty() {
        return Err(contract_err!("train_clean needs a non-empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(contract_err!("batch size must be positive"));
    }
    let (train, val) = ds.split_holdout(VALIDATION_FRACTION);
    let mixup_seed = stream(cfg.seed, "mixup");
    let pair_seed = stream(cfg.seed, "mixup-pairs");
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for (b, idx) in batches.iter().enumerate() {
            let step = derive_seed(epoch as u64, b as u64);
            let perm = permutation(idx.len(), derive_seed(pair_seed, step));
            let partners: Vec<usize> = perm.iter().map(|&p| idx[p]).collect();
            let mb = mixup_batch(
                &train,
                idx,
                &partners,
                cfg.alpha,
                derive_seed(mixup_seed, step),
            )?;

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.constant(mb.inputs);
            let logits = model.forward_bound(&mut tape, &bound, x)?;
            let loss = tape.cross_entropy(logits, &mb.soft_labels)?;
            let value = tape.value(loss).data()[0];
            check_loss("stage0", epoch, value)?;
            total += value * idx.len() as f64;
            let grads = tape.backward(loss)?;
            model.store_grads(&bound, &grads)?;
            sgd_step(model.params_mut(), cfg.lr)?;
        }
        let val_accuracy = if val.is_empty() {
            0.0
        } else {
            model.accuracy(&val)?
        };
        metrics.push(EpochMetrics {
            epoch,
            loss: total / train.len() as f64,
            val_accuracy,
        });
    }
    Ok(metrics)
}

/// Plain hard-label cross-entropy fine-tuning over all of `ds`. This is the
/// reference trajectory the regularized stages collapse to when their extra
/// terms are switched off.
pub fn fine_tune_ce(
    model: &mut Model,
    ds: &Dataset,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut total = 0.0;
        for idx in epoch_batches(ds.len(), batch_size, seed, epoch) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let x = tape.constant(ds.batch(&idx)?);
            let logits = model.forward_bound(&mut tape, &bound, x)?;
            let loss =
                tape.cross_entropy(logits, &one_hot(&ds.batch_labels(&idx), ds.num_classes()))?;
            let value = tape.value(loss).data()[0];
            check_loss("fine-tune", epoch, value)?;
            total += value * idx.len() as f64;
            let grads = tape.backward(loss)?;
            model.store_grads(&bound, &grads)?;
            sgd_step(model.params_mut(), lr)?;
        }
        losses.push(total / ds.len().max(1) as f64);
    }
    Ok(losses)
}
