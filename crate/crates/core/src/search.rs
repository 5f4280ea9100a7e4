//! Stage 3 bit-width search: bisection on the fault-free accuracy
//! predicate, with reliability met by widening MSB protection.

use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{contract_err, Error, Result};
use crate::fault::evaluate_reliability;
use crate::model::Model;
use crate::quant::{QuantizedModel, MAX_BITS, MIN_BITS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantSearchConfig {
    pub min_bits: u32,
    pub max_bits: u32,
    pub accuracy_threshold: f64,
    pub reliability_threshold: f64,
    /// BER at which reliability (mean faulted accuracy) is measured.
    pub eval_ber: f64,
    pub trials: usize,
    pub n_msb: u32,
    pub n_msb_max: u32,
}

impl QuantSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_BITS <= self.min_bits
            && self.min_bits <= self.max_bits
            && self.max_bits <= MAX_BITS)
        {
            return Err(contract_err!(
                "bit range [{}, {}] not within [{}, {}]",
                self.min_bits,
                self.max_bits,
                MIN_BITS,
                MAX_BITS
            ));
        }
        for (name, v) in [
            ("accuracy", self.accuracy_threshold),
            ("reliability", self.reliability_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(contract_err!("{} threshold {} outside [0,1]", name, v));
            }
        }
        if !(0.0..=1.0).contains(&self.eval_ber) {
            return Err(contract_err!("eval ber {} outside [0,1]", self.eval_ber));
        }
        if self.trials == 0 {
            return Err(contract_err!("search trials must be >= 1"));
        }
        if self.n_msb > self.n_msb_max {
            return Err(contract_err!(
                "n_msb {} exceeds n_msb_max {}",
                self.n_msb,
                self.n_msb_max
            ));
        }
        Ok(())
    }

    /// Upper bound on the number of probes for this range.
    pub fn max_probes(&self) -> usize {
        let span = (self.max_bits - self.min_bits + 1) as usize;
        span.next_power_of_two().trailing_zeros() as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDecision {
    /// Accuracy below threshold: search continues above.
    TooFewBits,
    /// Accuracy met, reliability unmet at every allowed `n_msb`: search
    /// continues below.
    Unreliable,
    Accepted,
}

impl ProbeDecision {
    pub fn name(self) -> &'static str {
        match self {
            Self::TooFewBits => "raise_bits",
            Self::Unreliable => "lower_bits",
            Self::Accepted => "accept",
        }
    }
}

/// One probed bit width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    /// Interval `[lo, hi]` the probe was drawn from.
    pub lo: u32,
    pub hi: u32,
    pub bits: u32,
    pub accuracy: f64,
    /// Last `n_msb` tried; meaningful when accuracy passed.
    pub n_msb: u32,
    /// Reliability at that `n_msb`, if measured.
    pub reliability: Option<f64>,
    pub decision: ProbeDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub model: QuantizedModel,
    pub bits: u32,
    pub n_msb: u32,
    pub accuracy: f64,
    pub reliability: f64,
    pub log: Vec<Probe>,
}

/// Searches with reliability measured by serial fault trials.
pub fn search_bit_width(
    model: &Model,
    ds: &Dataset,
    cfg: &QuantSearchConfig,
    seed: u64,
) -> Result<SearchOutcome> {
    search_bit_width_with(model, ds, cfg, |q| {
        let rows = evaluate_reliability(q, ds, &[cfg.eval_ber], cfg.trials, seed)?;
        Ok(rows[0].mean_accuracy)
    })
}

/// Bisection over `[min_bits, max_bits]` starting at the midpoint. A probe
/// whose quantized accuracy is below the threshold moves the search up. A
/// probe that meets it gets TMR with `n_msb`, escalated one bit at a time up
/// to `n_msb_max` until `reliability(model) >= r`; success ends the search,
/// failure moves it down.
pub fn search_bit_width_with(
    model: &Model,
    ds: &Dataset,
    cfg: &QuantSearchConfig,
    mut reliability: impl FnMut(&QuantizedModel) -> Result<f64>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let (mut lo, mut hi) = (cfg.min_bits, cfg.max_bits);
    let mut log = Vec::new();
    while lo <= hi {
        let bits = lo + (hi - lo) / 2;
        let plain = QuantizedModel::quantize(model, bits)?;
        let accuracy = plain.dequantize()?.accuracy(ds)?;
        let mut probe = Probe {
            lo,
            hi,
            bits,
            accuracy,
            n_msb: cfg.n_msb,
            reliability: None,
            decision: ProbeDecision::TooFewBits,
        };
        if accuracy < cfg.accuracy_threshold {
            log.push(probe);
            lo = bits + 1;
            continue;
        }
        for n in cfg.n_msb..=cfg.n_msb_max.min(bits) {
            let protected = plain.protect_msbs(n)?;
            let r = reliability(&protected)?;
            probe.n_msb = n;
            probe.reliability = Some(r);
            if r >= cfg.reliability_threshold {
                probe.decision = ProbeDecision::Accepted;
                log.push(probe);
                return Ok(SearchOutcome {
                    model: protected,
                    bits,
                    n_msb: n,
                    accuracy,
                    reliability: r,
                    log,
                });
            }
        }
        probe.decision = ProbeDecision::Unreliable;
        log.push(probe);
        if bits == 0 {
            break;
        }
        hi = bits - 1;
    }
    let best = log
        .iter()
        .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(b.bits.cmp(&a.bits)))
        .expect("at least one probe");
    Err(Error::SearchFailed {
        best_bits: best.bits,
        best_accuracy: best.accuracy,
        best_reliability: best.reliability.unwrap_or(f64::NAN),
    })
}

/// Whether `log` is a bisection trace over `[min, max]`: every probe is the
/// midpoint of its interval, and each next interval is the half its
/// predecessor's decision selects.
pub fn is_bisection_trace(log: &[Probe], min: u32, max: u32) -> bool {
    let (mut lo, mut hi) = (min, max);
    for (i, p) in log.iter().enumerate() {
        if p.lo != lo || p.hi != hi || p.bits != lo + (hi - lo) / 2 {
            return false;
        }
        match p.decision {
            ProbeDecision::Accepted => return i + 1 == log.len(),
            ProbeDecision::TooFewBits => lo = p.bits + 1,
            ProbeDecision::Unreliable => match p.bits.checked_sub(1) {
                Some(h) => hi = h,
                None => return i + 1 == log.len(),
            },
        }
        if lo > hi {
            return i + 1 == log.len();
        }
    }
    true
}
