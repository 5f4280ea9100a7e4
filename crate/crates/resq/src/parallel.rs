//! Data-parallel drivers for the embarrassingly parallel evaluations. Work
//! items own seed-derived RNGs, so results do not depend on thread count.

use rayon::prelude::*;

use resq_core::attack::{attacked_correct, eval_batches, AttackConfig};
use resq_core::data::Dataset;
use resq_core::fault::{summarize, trial_seed, FaultTarget, ReliabilityRow};
use resq_core::model::Model;

use crate::error::{Error, Result};

/// Parallel version of `resq_core::fault::evaluate_reliability`; trials run
/// concurrently and are reduced in trial order.
pub fn evaluate_reliability<T: FaultTarget + Sync + ?Sized>(
    target: &T,
    ds: &Dataset,
    bers: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<ReliabilityRow>> {
    if trials == 0 {
        return Err(
            resq_core::Error::Contract("reliability needs at least one trial".into()).into(),
        );
    }
    bers.iter()
        .map(|&ber| {
            let accs = (0..trials)
                .into_par_iter()
                .map(|t| target.faulted_accuracy(ds, ber, trial_seed(seed, t)))
                .collect::<resq_core::Result<Vec<_>>>()?;
            Ok(summarize(ber, &accs))
        })
        .collect()
}

/// Parallel version of `resq_core::attack::attack_accuracy`; batch `b`
/// draws from child stream `b` of the attack seed either way.
pub fn attack_accuracy(
    model: &Model,
    ds: &Dataset,
    cfg: &AttackConfig,
    batch_size: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Config(
            "attack evaluation needs a non-empty dataset".into(),
        ));
    }
    let batches = eval_batches(ds.len(), batch_size);
    let correct = batches
        .par_iter()
        .enumerate()
        .map(|(b, idx)| attacked_correct(model, ds, idx, cfg, b))
        .collect::<resq_core::Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / ds.len() as f64)
}
