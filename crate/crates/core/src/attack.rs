//! Gradient-sign evasion attacks under an L-infinity budget: FGSM, the
//! zero-start iterative method (IFGSM/BIM), PGD with random start, and MIM.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;

use crate::autodiff::Tape;
use crate::data::{one_hot, Dataset};
use crate::error::{contract_err, Result};
use crate::model::{argmax_rows, Model};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Fgsm,
    /// Iterative FGSM. Same update as [`AttackKind::Bim`].
    Ifgsm,
    Bim,
    Pgd,
    Mim,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [Self::Fgsm, Self::Ifgsm, Self::Bim, Self::Pgd, Self::Mim];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "fgsm",
            Self::Ifgsm => "ifgsm",
            Self::Bim => "bim",
            Self::Pgd => "pgd",
            Self::Mim => "mim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    /// Per-iteration step; `None` means `epsilon / steps`.
    pub step_size: Option<f64>,
    pub momentum: f64,
    /// Uniform start inside the ball; honoured by PGD only.
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// Default settings: 10 steps, step `epsilon/steps`, momentum 1, random
    /// start for PGD.
    pub fn new(kind: AttackKind, epsilon: f64, seed: u64) -> Self {
        Self {
            kind,
            epsilon,
            steps: if kind == AttackKind::Fgsm { 1 } else { 10 },
            step_size: None,
            momentum: 1.0,
            random_start: kind == AttackKind::Pgd,
            seed,
        }
    }

    pub fn step(&self) -> f64 {
        self.step_size
            .unwrap_or(self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(contract_err!("epsilon {} must be >= 0", self.epsilon));
        }
        if self.steps == 0 {
            return Err(contract_err!("attack steps must be >= 1"));
        }
        let step = self.step();
        if !(step >= 0.0) || (self.steps > 1 && step > self.epsilon) {
            return Err(contract_err!("step size {} outside [0, epsilon]", step));
        }
        Ok(())
    }
}

/// Gradient of mean cross-entropy with respect to the input batch.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let logits = model.forward_bound(&mut tape, &bound, xv)?;
    let loss = tape.cross_entropy(logits, &one_hot(labels, model.num_classes()))?;
    let grads = tape.backward(loss)?;
    Tensor::new(x.shape().to_vec(), grads.get_or_zeros(xv, x.len()))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_input(x: &Tensor) -> Result<()> {
    if x.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(contract_err!("attack input outside [0,1]"))
    }
}

/// `clamp(x + epsilon * sign(grad), 0, 1)`, projected like the iterative
/// attacks so the computed perturbation never exceeds `epsilon`.
pub fn fgsm(model: &Model, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<Tensor> {
    check_input(x)?;
    let g = input_gradient(model, x, labels)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xi, &gi)| project(xi + epsilon * sign(gi), xi, epsilon))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Projection onto the epsilon ball around `origin`, then onto `[0,1]`.
/// `origin ± epsilon` may round outward, so the result is nudged toward
/// `origin` until the computed distance is within budget.
fn project(v: f64, origin: f64, epsilon: f64) -> f64 {
    let mut c = v.clamp(origin - epsilon, origin + epsilon).clamp(0.0, 1.0);
    while (c - origin).abs() > epsilon {
        c = if c > origin {
            c.next_down()
        } else {
            c.next_up()
        };
    }
    c
}

/// Iterative sign attack. `observe` sees every iterate.
pub fn iterative_attack_observed(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    mut observe: impl FnMut(&Tensor),
) -> Result<Tensor> {
    cfg.validate()?;
    check_input(x)?;
    let eps = cfg.epsilon;
    let step = cfg.step();
    let mut cur = x.clone();
    if cfg.kind == AttackKind::Pgd && cfg.random_start && eps > 0.0 {
        let mut rng = rng_from(cfg.seed);
        for (c, &o) in cur.data_mut().iter_mut().zip(x.data()) {
            *c = project(o + rng.random_range(-eps..eps), o, eps);
        }
    }
    let rows = x.shape().first().copied().unwrap_or(1).max(1);
    let row_len = x.len() / rows;
    let mut momentum = alloc::vec![0.0; x.len()];
    for _ in 0..cfg.steps {
        let g = input_gradient(model, &cur, labels)?;
        let dir: Vec<f64> = if cfg.kind == AttackKind::Mim {
            for (m_row, g_row) in momentum.chunks_mut(row_len).zip(g.data().chunks(row_len)) {
                let l1: f64 = g_row.iter().map(|v| v.abs()).sum();
                for (m, gi) in m_row.iter_mut().zip(g_row) {
                    let normed = if l1 > 0.0 { gi / l1 } else { 0.0 };
                    *m = cfg.momentum * *m + normed;
                }
            }
            momentum.iter().map(|&m| sign(m)).collect()
        } else {
            g.data().iter().map(|&gi| sign(gi)).collect()
        };
        for ((c, &o), d) in cur.data_mut().iter_mut().zip(x.data()).zip(dir) {
            *c = project(*c + step * d, o, eps);
        }
        observe(&cur);
    }
    Ok(cur)
}

pub fn iterative_attack(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor> {
    iterative_attack_observed(model, x, labels, cfg, |_| {})
}

/// Runs the configured attack on one batch. `batch_index` selects the
/// batch's child stream for any randomness.
pub fn attack_batch(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    batch_index: usize,
) -> Result<Tensor> {
    match cfg.kind {
        AttackKind::Fgsm => {
            cfg.validate()?;
            fgsm(model, x, labels, cfg.epsilon)
        }
        _ => {
            let per_batch = AttackConfig {
                seed: derive_seed(cfg.seed, batch_index as u64),
                ..*cfg
            };
            iterative_attack(model, x, labels, &per_batch)
        }
    }
}

/// Batches used by [`attack_accuracy`], in dataset order.
pub fn eval_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let idx: Vec<usize> = (0..n).collect();
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Correct predictions on the attacked copy of one batch.
pub fn attacked_correct(
    model: &Model,
    ds: &Dataset,
    idx: &[usize],
    cfg: &AttackConfig,
    batch_index: usize,
) -> Result<usize> {
    let x = ds.batch(idx)?;
    let labels = ds.batch_labels(idx);
    let adv = attack_batch(model, &x, &labels, cfg, batch_index)?;
    let pred = argmax_rows(&model.forward(&adv)?);
    Ok(pred.iter().zip(&labels).filter(|(p, l)| p == l).count())
}

pub fn attack_accuracy(
    model: &Model,
    ds: &Dataset,
    cfg: &AttackConfig,
    batch_size: usize,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(contract_err!("attack evaluation needs a non-empty dataset"));
    }
    let mut correct = 0;
    for (b, idx) in eval_batches(ds.len(), batch_size).iter().enumerate() {
        correct += attacked_correct(model, ds, idx, cfg, b)?;
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackTable {
    pub clean_accuracy: f64,
    pub rows: Vec<(AttackConfig, f64)>,
}

pub fn evaluate_attacks(
    model: &Model,
    ds: &Dataset,
    attacks: &[AttackConfig],
    batch_size: usize,
) -> Result<AttackTable> {
    let clean_accuracy = model.accuracy(ds)?;
    let rows = attacks
        .iter()
        .map(|cfg| Ok((*cfg, attack_accuracy(model, ds, cfg, batch_size)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackTable {
        clean_accuracy,
        rows,
    })
}
