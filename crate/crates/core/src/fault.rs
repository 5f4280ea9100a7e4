//! Bernoulli bit-flip faults on quantized weight representations, Stage 2
//! fault-aware fine-tuning and BER-sweep reliability evaluation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{sgd_step, Tape, Var};
use crate::bpfc::feature_distance;
use crate::data::{one_hot, Dataset};
use crate::error::{contract_err, Result};
use crate::model::Model;
use crate::quant::{QuantizedLayer, QuantizedModel};
use crate::rng::{derive_seed, rng_from, stream};
use crate::train::{check_loss, epoch_batches};

/// Width of the transient quantized view used for float models.
pub const VIEW_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultConfig {
    pub ber: f64,
    pub bits_per_weight: u32,
    pub seed: u64,
    pub trials: usize,
}

impl FaultConfig {
    pub fn new(ber: f64, seed: u64) -> Self {
        Self {
            ber,
            bits_per_weight: VIEW_BITS,
            seed,
            trials: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ber(self.ber)?;
        if self.trials == 0 {
            return Err(contract_err!("fault trials must be >= 1"));
        }
        if !(2..=16).contains(&self.bits_per_weight) {
            return Err(contract_err!(
                "bits per weight {} outside [2,16]",
                self.bits_per_weight
            ));
        }
        Ok(())
    }
}

fn check_ber(ber: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ber) {
        Ok(())
    } else {
        Err(contract_err!("bit error rate {} outside [0,1]", ber))
    }
}

/// Flips each of the low `bits` bits of every word independently with
/// probability `ber`. One uniform draw is consumed per bit in word-major,
/// LSB-first order, so for a fixed seed the flip set at a lower BER is a
/// subset of the flip set at any higher BER.
pub fn flip_bits(words: &[u32], bits: u32, ber: f64, seed: u64) -> (Vec<u32>, u64) {
    let mut rng = rng_from(seed);
    let mut flips = 0u64;
    let out = words
        .iter()
        .map(|&w| {
            let mut mask = 0u32;
            for j in 0..bits {
                if rng.random::<f64>() < ber {
                    mask |= 1 << j;
                    flips += 1;
                }
            }
            w ^ mask
        })
        .collect();
    (out, flips)
}

/// What [`inject_into_model`] did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InjectionReport {
    pub flips: u64,
    /// Targeted layers left untouched because all their values are equal.
    pub skipped: Vec<String>,
}

/// Faulted copy of a float model. Every parameter layer goes through a
/// `bits_per_weight` affine quantize/dequantize round trip; layers named in
/// `layer_filter` additionally have their codes flipped at `cfg.ber`.
/// Layer `i` draws its faults from child stream `i` of `cfg.seed`.
pub fn inject_into_model(
    model: &Model,
    layer_filter: &[String],
    cfg: &FaultConfig,
) -> Result<(Model, InjectionReport)> {
    check_ber(cfg.ber)?;
    let mut view = model.clone();
    let mut report = InjectionReport::default();
    for (i, layer) in view.layers_mut().iter_mut().enumerate() {
        if !layer.kind.has_params() {
            continue;
        }
        let q = QuantizedLayer::from_layer(layer, cfg.bits_per_weight)?;
        let targeted = layer_filter.contains(&layer.name);
        if q.scale == 0.0 {
            if targeted {
                report.skipped.push(layer.name.clone());
            }
            continue;
        }
        let q = if targeted {
            let (fq, flips) = q.with_faults(cfg.ber, derive_seed(cfg.seed, i as u64))?;
            report.flips += flips;
            fq
        } else {
            q
        };
        layer.set_flat_params(&q.dequantize()?)?;
    }
    Ok((view, report))
}

/// A model that can be scored under random faults.
pub trait FaultTarget {
    /// Accuracy on `ds` after one fault draw at `ber` from `seed`.
    fn faulted_accuracy(&self, ds: &Dataset, ber: f64, seed: u64) -> Result<f64>;
}

impl FaultTarget for Model {
    /// Faults hit the 8-bit view of every parameter layer.
    fn faulted_accuracy(&self, ds: &Dataset, ber: f64, seed: u64) -> Result<f64> {
        let all = self.param_layer_names();
        let (view, _) = inject_into_model(self, &all, &FaultConfig::new(ber, seed))?;
        view.accuracy(ds)
    }
}

impl FaultTarget for QuantizedModel {
    /// Faults hit stored codes and replicas; the vote happens on dequantize.
    fn faulted_accuracy(&self, ds: &Dataset, ber: f64, seed: u64) -> Result<f64> {
        let (faulted, _) = self.with_faults(ber, seed)?;
        faulted.dequantize()?.accuracy(ds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityRow {
    pub ber: f64,
    pub mean_accuracy: f64,
    /// Sample standard deviation over trials; zero for a single trial.
    pub std: f64,
    pub trials: usize,
}

/// Seed of trial `t`. The same trial seed is reused at every BER, so the
/// sweep compares nested fault sets.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    derive_seed(seed, trial as u64)
}

pub fn summarize(ber: f64, accuracies: &[f64]) -> ReliabilityRow {
    let n = accuracies.len();
    let mean = accuracies.iter().sum::<f64>() / n.max(1) as f64;
    let std = if n > 1 {
        libm::sqrt(
            accuracies
                .iter()
                .map(|a| (a - mean) * (a - mean))
                .sum::<f64>()
                / (n - 1) as f64,
        )
    } else {
        0.0
    };
    ReliabilityRow {
        ber,
        mean_accuracy: mean,
        std,
        trials: n,
    }
}

/// Mean and spread of faulted accuracy over `trials` draws per BER.
pub fn evaluate_reliability<T: FaultTarget + ?Sized>(
    target: &T,
    ds: &Dataset,
    bers: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<ReliabilityRow>> {
    if trials == 0 {
        return Err(contract_err!("reliability needs at least one trial"));
    }
    bers.iter()
        .map(|&ber| {
            check_ber(ber)?;
            let accs = (0..trials)
                .map(|t| target.faulted_accuracy(ds, ber, trial_seed(seed, t)))
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(ber, &accs))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultTrainConfig {
    pub consistency_weight: f64,
    pub realizations: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FaultTrainConfig {
    fn default() -> Self {
        Self {
            consistency_weight: 1.0,
            realizations: 1,
            epochs: 5,
            lr: 0.02,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl FaultTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 {
            return Err(contract_err!("realizations per batch must be >= 1"));
        }
        if !(self.consistency_weight >= 0.0) {
            return Err(contract_err!("fault consistency weight must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(contract_err!("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultEpoch {
    pub epoch: usize,
    pub ce: f64,
    pub weighted_consistency: f64,
    pub total: f64,
}

/// Constant per-layer offsets `view - model` for the listed layers.
fn fault_offsets(model: &Model, view: &Model, targets: &[String]) -> Vec<Option<Vec<f64>>> {
    model
        .layers()
        .iter()
        .zip(view.layers())
        .map(|(a, b)| {
            (a.kind.has_params() && targets.contains(&a.name)).then(|| {
                a.flat_params()
                    .iter()
                    .zip(b.flat_params())
                    .map(|(x, y)| y - x)
                    .collect()
            })
        })
        .collect()
}

/// Stage 2. Freezes `critical`, then minimizes
/// `CE(f(W,x), y) + lambda * E[ ||f(W,x) - f(W_hat,x)||^2 ]` over the other
/// layers, where `W_hat` carries faults in the unfrozen layers only. The
/// faulted weights enter as `W + delta` with `delta` constant, so gradients
/// pass straight through the flip. Trainable flags are restored on return.
pub fn train_fault_aware(
    model: &mut Model,
    ds: &Dataset,
    critical: &[String],
    cfg: &FaultTrainConfig,
    fault: &FaultConfig,
) -> Result<Vec<FaultEpoch>> {
    cfg.validate()?;
    fault.validate()?;
    if ds.is_empty() {
        return Err(contract_err!("train_fault_aware needs a non-empty dataset"));
    }
    let saved: Vec<(bool, bool)> = model
        .layers()
        .iter()
        .map(|l| {
            (
                l.weight.as_ref().is_some_and(|p| p.trainable),
                l.bias.as_ref().is_some_and(|p| p.trainable),
            )
        })
        .collect();
    model.set_frozen(critical)?;
    let result = fault_epochs(model, ds, critical, cfg, fault);
    for (l, (w, b)) in model.layers_mut().iter_mut().zip(saved) {
        if let Some(p) = &mut l.weight {
            p.trainable = w;
        }
        if let Some(p) = &mut l.bias {
            p.trainable = b;
        }
    }
    result
}

fn fault_epochs(
    model: &mut Model,
    ds: &Dataset,
    critical: &[String],
    cfg: &FaultTrainConfig,
    fault: &FaultConfig,
) -> Result<Vec<FaultEpoch>> {
    let targets: Vec<String> = model
        .param_layer_names()
        .into_iter()
        .filter(|n| !critical.contains(n))
        .collect();
    let fault_seed = stream(fault.seed, "stage2-faults");
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut ce_sum, mut cons_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (b, idx) in epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let x = ds.batch(idx)?;
            let targets_oh = one_hot(&ds.batch_labels(idx), model.num_classes());
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xv = tape.constant(x);
            let logits = model.forward_bound(&mut tape, &bound, xv)?;
            let ce = tape.cross_entropy(logits, &targets_oh)?;
            let ce_value = tape.value(ce).data()[0];
            let mut total = ce;
            let mut cons_value = 0.0;
            if cfg.consistency_weight > 0.0 {
                let step = derive_seed(fault_seed, derive_seed(epoch as u64, b as u64));
                let mut sum: Option<Var> = None;
                for r in 0..cfg.realizations {
                    let draw = FaultConfig {
                        seed: derive_seed(step, r as u64),
                        ..*fault
                    };
                    let (view, _) = inject_into_model(model, &targets, &draw)?;
                    let offsets = fault_offsets(model, &view, &targets);
                    let faulted = model.bind_offset(&mut tape, &bound, &offsets)?;
                    let logits_f = model.forward_bound(&mut tape, &faulted, xv)?;
                    let d = feature_distance(&mut tape, logits, logits_f, idx.len())?;
                    sum = Some(match sum {
                        None => d,
                        Some(s) => tape.add(s, d)?,
                    });
                }
                let sum = sum.expect("at least one realization");
                let cons = tape.scale(sum, 1.0 / cfg.realizations as f64);
                cons_value = tape.value(cons).data()[0];
                let weighted = tape.scale(cons, cfg.consistency_weight);
                total = tape.add(ce, weighted)?;
            }
            let total_value = tape.value(total).data()[0];
            check_loss("stage2", epoch, total_value)?;
            let w = idx.len() as f64;
            ce_sum += ce_value * w;
            cons_sum += cfg.consistency_weight * cons_value * w;
            total_sum += total_value * w;
            let grads = tape.backward(total)?;
            model.store_grads(&bound, &grads)?;
            sgd_step(model.params_mut(), cfg.lr)?;
        }
        let n = ds.len() as f64;
        history.push(FaultEpoch {
            epoch,
            ce: ce_sum / n,
            weighted_consistency: cons_sum / n,
            total: total_sum / n,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::build_mlp;
    use crate::quant::PackedBits;
    use crate::tensor::Tensor;
    use crate::train::fine_tune_ce;
    use alloc::vec;

    #[test]
    fn zero_ber_is_identity() {
        let w = [3u32, 200, 17, 0];
        assert_eq!(flip_bits(&w, 8, 0.0, 5), (w.to_vec(), 0));
    }

    #[test]
    fn full_ber_complements() {
        let w = [3u32, 200, 17, 0, 255];
        let (out, flips) = flip_bits(&w, 8, 1.0, 5);
        assert_eq!(flips, 40);
        for (a, b) in w.iter().zip(out) {
            assert_eq!(b, !a & 0xff);
        }
    }

    #[test]
    fn flip_count_concentrates() {
        let words = vec![0u32; 125_000];
        let (out, flips) = flip_bits(&words, 8, 0.01, 11);
        let counted: u32 = out.iter().map(|w| w.count_ones()).sum();
        assert_eq!(u64::from(counted), flips);
        assert!((flips as f64 - 10_000.0).abs() < 3.0 * 99.5);
    }

    #[test]
    fn lower_ber_flips_are_nested() {
        let words = vec![0u32; 2000];
        let (lo, _) = flip_bits(&words, 8, 0.01, 3);
        let (hi, _) = flip_bits(&words, 8, 0.1, 3);
        for (a, b) in lo.iter().zip(&hi) {
            assert_eq!(a & b, *a);
        }
    }

    #[test]
    fn msb_flip_moves_by_128_steps() {
        let w = Tensor::new(vec![2], vec![-0.5, 0.77]).unwrap();
        let q = crate::quant::quantize_layer(&w, 8).unwrap();
        let before = q.dequantize().unwrap();
        let mut f = q.clone();
        let mut codes = f.codes.unpack();
        codes[1] ^= 1 << 7;
        f.codes = PackedBits::pack(&codes, 8).unwrap();
        let after = f.dequantize().unwrap();
        assert_eq!((before[1] - after[1]).abs(), 128.0 * q.scale);
    }

    #[test]
    fn view_with_zero_ber_is_round_trip() {
        let m = build_mlp(6, &[5], 3, 2).unwrap();
        let before = m.fingerprint();
        let all = m.param_layer_names();
        let (a, rep) = inject_into_model(&m, &all, &FaultConfig::new(0.0, 1)).unwrap();
        let (b, _) = inject_into_model(&m, &[], &FaultConfig::new(0.5, 1)).unwrap();
        assert_eq!(rep.flips, 0);
        assert_eq!(a, b);
        assert_eq!(m.fingerprint(), before);
        for (l, v) in m.layers().iter().zip(a.layers()) {
            if l.kind.has_params() {
                let q = QuantizedLayer::from_layer(l, 8).unwrap();
                for (x, y) in l.flat_params().iter().zip(v.flat_params()) {
                    assert!((x - y).abs() <= q.scale / 2.0 + 1e-15);
                }
            }
        }
    }

    #[test]
    fn degenerate_target_is_skipped() {
        let mut m = build_mlp(2, &[2], 2, 1).unwrap();
        let n = m.layer("fc1").unwrap().param_count();
        m.layer_mut("fc1")
            .unwrap()
            .set_flat_params(&vec![0.5; n])
            .unwrap();
        let (v, rep) = inject_into_model(&m, &["fc1".into()], &FaultConfig::new(1.0, 1)).unwrap();
        assert_eq!(rep.skipped, ["fc1"]);
        assert_eq!(v.layer("fc1"), m.layer("fc1"));
    }

    #[test]
    fn zero_weight_zero_ber_matches_fine_tuning() {
        let ds = synth_dataset(4, 100, 3, 6).unwrap();
        let base = build_mlp(36, &[8], 3, 5).unwrap();
        let cfg = FaultTrainConfig {
            consistency_weight: 0.0,
            epochs: 2,
            lr: 0.05,
            batch_size: 16,
            seed: 9,
            realizations: 1,
        };
        let mut a = base.clone();
        train_fault_aware(&mut a, &ds, &[], &cfg, &FaultConfig::new(0.0, 1)).unwrap();
        let mut b = base;
        fine_tune_ce(&mut b, &ds, 2, 0.05, 16, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn critical_layers_stay_frozen() {
        let ds = synth_dataset(4, 100, 3, 6).unwrap();
        let mut m = build_mlp(36, &[8, 6], 3, 5).unwrap();
        let before = m.layer("fc2").unwrap().flat_params();
        let cfg = FaultTrainConfig {
            epochs: 1,
            batch_size: 20,
            realizations: 2,
            ..Default::default()
        };
        train_fault_aware(
            &mut m,
            &ds,
            &["fc2".into()],
            &cfg,
            &FaultConfig::new(0.01, 3),
        )
        .unwrap();
        assert_eq!(m.layer("fc2").unwrap().flat_params(), before);
        assert!(m.layer("fc2").unwrap().weight.as_ref().unwrap().trainable);
    }

    #[test]
    fn reliability_at_zero_ber_is_exact() {
        let ds = synth_dataset(4, 60, 3, 6).unwrap();
        let m = build_mlp(36, &[8], 3, 5).unwrap();
        let q = QuantizedModel::quantize(&m, 6).unwrap();
        let clean = q.dequantize().unwrap().accuracy(&ds).unwrap();
        let rows = evaluate_reliability(&q, &ds, &[0.0], 4, 1).unwrap();
        assert_eq!(rows[0].mean_accuracy, clean);
        assert_eq!(rows[0].std, 0.0);
    }
}
