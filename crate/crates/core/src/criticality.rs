//! Layer criticality from an exponential moving average of per-layer
//! gradient norms.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{contract_err, Result};
use crate::model::BoundParams;
use crate::model::Model;
use crate::train::epoch_batches;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Keep the `ceil(value * layers)` highest-scoring layers.
    TopFraction,
    /// Keep layers whose normalized score is at least `value`.
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalityConfig {
    pub ema_beta: f64,
    pub window: usize,
    pub mode: ThresholdMode,
    pub threshold: f64,
    pub batch_size: usize,
}

impl Default for CriticalityConfig {
    fn default() -> Self {
        Self {
            ema_beta: 0.3,
            window: 20,
            mode: ThresholdMode::TopFraction,
            threshold: 0.3,
            batch_size: 32,
        }
    }
}

impl CriticalityConfig {
    pub fn validate(&self) -> Result<()> {
        // beta = 1 is admitted: it degenerates to "last observation".
        if !(self.ema_beta > 0.0 && self.ema_beta <= 1.0) {
            return Err(contract_err!("ema beta {} outside (0,1]", self.ema_beta));
        }
        if self.window == 0 {
            return Err(contract_err!("criticality window must be >= 1"));
        }
        check_threshold(self.threshold)
    }
}

fn check_threshold(value: f64) -> Result<()> {
    if value > 0.0 && value <= 1.0 {
        Ok(())
    } else {
        Err(contract_err!("threshold {} outside (0,1]", value))
    }
}

/// One EMA step. The first observation initializes the average.
pub fn ema_update(previous: Option<f64>, observation: f64, beta: f64) -> f64 {
    match previous {
        None => observation,
        Some(prev) => beta * observation + (1.0 - beta) * prev,
    }
}

/// Folds a sequence of observations through [`ema_update`].
pub fn ema_of(observations: &[f64], beta: f64) -> Option<f64> {
    observations
        .iter()
        .fold(None, |acc, &x| Some(ema_update(acc, x, beta)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalityReport {
    /// Final EMA per parameter layer, in forward order.
    pub scores: Vec<(String, f64)>,
    /// Scores divided by the maximum; exactly one entry equals 1.
    pub normalized: Vec<(String, f64)>,
    pub critical: Vec<String>,
    pub config: CriticalityConfig,
}

impl CriticalityReport {
    pub fn from_scores(scores: Vec<(String, f64)>, config: CriticalityConfig) -> Result<Self> {
        config.validate()?;
        let normalized = normalize(&scores)?;
        let critical = select_critical(&scores, config.mode, config.threshold)?;
        Ok(Self {
            scores,
            normalized,
            critical,
            config,
        })
    }

    pub fn is_critical(&self, name: &str) -> bool {
        self.critical.iter().any(|c| c == name)
    }
}

/// `score / max`. Later layers tied with the maximum get the largest value
/// below 1 so that a single layer is the argmax.
pub fn normalize(scores: &[(String, f64)]) -> Result<Vec<(String, f64)>> {
    if scores.is_empty() {
        return Err(contract_err!("no layer scores"));
    }
    let (arg, max) =
        scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, (_, v))| {
                if *v > bv {
                    (i, *v)
                } else {
                    (bi, bv)
                }
            });
    let below_one = f64::from_bits(1.0f64.to_bits() - 1);
    Ok(scores
        .iter()
        .enumerate()
        .map(|(i, (name, v))| {
            let n = if i == arg {
                1.0
            } else if max > 0.0 {
                (v / max).min(below_one)
            } else {
                0.0
            };
            (name.clone(), n)
        })
        .collect())
}

/// Chooses the critical set. Ties are resolved in layer order.
pub fn select_critical(
    scores: &[(String, f64)],
    mode: ThresholdMode,
    value: f64,
) -> Result<Vec<String>> {
    check_threshold(value)?;
    let normalized = normalize(scores)?;
    let chosen: Vec<String> = match mode {
        ThresholdMode::TopFraction => {
            // Guard against products such as 0.3 * 10 = 3.0000000000000004.
            let count = libm::ceil(value * scores.len() as f64 - 1e-9) as usize;
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].1.total_cmp(&scores[a].1).then(a.cmp(&b)));
            let mut keep: Vec<usize> = order.into_iter().take(count.max(1)).collect();
            keep.sort_unstable();
            keep.into_iter().map(|i| scores[i].0.clone()).collect()
        }
        ThresholdMode::Absolute => normalized
            .into_iter()
            .filter(|(_, n)| *n >= value)
            .map(|(name, _)| name)
            .collect(),
    };
    Ok(chosen)
}

/// Per-layer L2 norms of the gradient of `loss` at the current parameters.
pub fn layer_gradient_norms(
    model: &Model,
    mut loss: impl FnMut(&Model, &mut Tape, &BoundParams) -> Result<Var>,
) -> Result<Vec<(String, f64)>> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let l = loss(model, &mut tape, &bound)?;
    let grads = tape.backward(l)?;
    Ok(model
        .layer_grads(&bound, &grads)
        .into_iter()
        .map(|(name, g)| (name, libm::sqrt(g.iter().map(|v| v * v).sum())))
        .collect())
}

/// Tracks the EMA of per-layer gradient norms over `cfg.window` minibatches
/// without updating parameters, then selects the critical layers.
///
/// `loss(model, tape, bound, batch_indices, iteration)` records the loss
/// whose gradients are measured, normally the Stage 1 objective.
pub fn track_ema(
    model: &Model,
    ds: &Dataset,
    cfg: &CriticalityConfig,
    seed: u64,
    mut loss: impl FnMut(&Model, &mut Tape, &BoundParams, &[usize], usize) -> Result<Var>,
) -> Result<CriticalityReport> {
    cfg.validate()?;
    let batches = epoch_batches(ds.len(), cfg.batch_size, seed, 0);
    if cfg.window > batches.len() {
        return Err(contract_err!(
            "window {} exceeds the {} available batches",
            cfg.window,
            batches.len()
        ));
    }
    let names = model.param_layer_names();
    let mut ema: Vec<Option<f64>> = alloc::vec![None; names.len()];
    for (t, idx) in batches.iter().take(cfg.window).enumerate() {
        let norms = layer_gradient_norms(model, |m, tape, bound| loss(m, tape, bound, idx, t))?;
        for (slot, (_, norm)) in ema.iter_mut().zip(norms) {
            *slot = Some(ema_update(*slot, norm, cfg.ema_beta));
        }
    }
    let scores = names
        .into_iter()
        .zip(ema)
        .map(|(n, e)| (n, e.unwrap_or(0.0)))
        .collect();
    CriticalityReport::from_scores(scores, *cfg)
}
