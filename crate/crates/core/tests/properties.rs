//! Invariants of the quantizer, bit packing, fault model, mixup, bit-plane
//! transform, EMA and attacks, checked on generated inputs.

use proptest::prelude::*;

use resq_core::attack::{fgsm, iterative_attack_observed, AttackConfig, AttackKind};
use resq_core::bpfc::{bpfc_transform, noise_half_width};
use resq_core::criticality::{ema_of, ema_update, normalize, select_critical, ThresholdMode};
use resq_core::data::{mixup_with_lambdas, synth_dataset};
use resq_core::fault::flip_bits;
use resq_core::model::build_mlp;
use resq_core::quant::{dequantize_value, quantize_values, tmr_vote, tmr_vote_word, PackedBits};
use resq_core::Tensor;

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 2..200)
}

proptest! {
    #[test]
    fn quantization_error_is_at_most_half_a_step(values in weights(), bits in 2u32..=16) {
        prop_assume!(values.iter().any(|&v| v != values[0]));
        let (codes, s, x_min) = quantize_values(&values, bits).unwrap();
        for (&v, &c) in values.iter().zip(&codes) {
            prop_assert!(c < 1 << bits);
            let err = (dequantize_value(c, s, x_min) - v).abs();
            prop_assert!(err <= s / 2.0 * (1.0 + 1e-9), "{v} -> {c}: err {err} step {s}");
        }
    }

    #[test]
    fn quantization_is_idempotent(values in weights(), bits in 2u32..=12) {
        prop_assume!(values.iter().any(|&v| v != values[0]));
        let (codes, s, x_min) = quantize_values(&values, bits).unwrap();
        let back: Vec<f64> = codes.iter().map(|&c| dequantize_value(c, s, x_min)).collect();
        let (codes2, _, _) = quantize_values(&back, bits).unwrap();
        prop_assert_eq!(codes, codes2);
    }

    #[test]
    fn packing_round_trips(codes in prop::collection::vec(any::<u32>(), 0..100), width in 1u32..=16) {
        let codes: Vec<u32> = codes.iter().map(|c| c & ((1 << width) - 1)).collect();
        let packed = PackedBits::pack(&codes, width).unwrap();
        prop_assert_eq!(packed.bytes().len(), (codes.len() * width as usize).div_ceil(8));
        prop_assert_eq!(packed.unpack(), codes);
    }

    #[test]
    fn vote_masks_any_single_replica(word in any::<u32>(), noise in any::<u32>(), which in 0usize..3) {
        let mut r = [word; 3];
        r[which] ^= noise;
        prop_assert_eq!(tmr_vote_word(r[0], r[1], r[2]), word);
    }

    #[test]
    fn bitwise_vote_matches_word_vote(a in any::<u8>(), b in any::<u8>(), c in any::<u8>()) {
        let bits: u8 = (0..8).map(|i| tmr_vote((a >> i) & 1, (b >> i) & 1, (c >> i) & 1) << i).sum();
        prop_assert_eq!(u32::from(bits), tmr_vote_word(a.into(), b.into(), c.into()));
    }

    #[test]
    fn flip_masks_nest_across_rates(
        words in prop::collection::vec(any::<u32>(), 1..64),
        bits in 1u32..=16,
        lo in 0.0f64..0.5,
        extra in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let words: Vec<u32> = words.iter().map(|w| w & ((1 << bits) - 1)).collect();
        let (a, na) = flip_bits(&words, bits, lo, seed);
        let (b, nb) = flip_bits(&words, bits, lo + extra, seed);
        prop_assert!(na <= nb);
        for ((w, x), y) in words.iter().zip(&a).zip(&b) {
            let (ma, mb) = (w ^ x, w ^ y);
            prop_assert_eq!(ma & !mb, 0, "low-rate mask must be a subset");
            prop_assert_eq!(mb >> bits, 0, "flips stay within the word width");
        }
        let counted: u32 = a.iter().zip(&words).map(|(x, w)| (x ^ w).count_ones()).sum();
        prop_assert_eq!(u64::from(counted), na);
    }

    #[test]
    fn mixup_is_a_convex_combination(
        lambdas in prop::collection::vec(0.0f64..=1.0, 1..8),
        seed in 0u64..1000,
    ) {
        let ds = synth_dataset(seed, 16, 4, 4).unwrap();
        let n = lambdas.len();
        let ii: Vec<usize> = (0..n).collect();
        let jj: Vec<usize> = (0..n).map(|p| 15 - p).collect();
        let mb = mixup_with_lambdas(&ds, &ii, &jj, &lambdas).unwrap();
        let (xi, xj) = (ds.batch(&ii).unwrap(), ds.batch(&jj).unwrap());
        for ((m, a), b) in mb.inputs.data().iter().zip(xi.data()).zip(xj.data()) {
            prop_assert!(*m >= a.min(*b) - 1e-12 && *m <= a.max(*b) + 1e-12);
        }
        for row in mb.soft_labels.data().chunks(ds.num_classes()) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn bit_plane_transform_clears_low_bits(
        levels in prop::collection::vec(any::<u8>(), 1..64),
        k in 1u32..=7,
        seed in any::<u64>(),
    ) {
        let x = Tensor::new(vec![levels.len()], levels.iter().map(|&l| f64::from(l) / 255.0).collect()).unwrap();
        let (pre, q) = bpfc_transform(&x, k, seed).unwrap();
        let half = noise_half_width(k);
        for ((&l, p), q) in levels.iter().zip(pre.data()).zip(q.data()) {
            let (p, q) = ((p * 255.0).round(), (q * 255.0).round());
            prop_assert_eq!(q as u32 % (1 << k), 0);
            prop_assert!((0.0..=255.0).contains(&p));
            prop_assert!((p - f64::from(l)).abs() <= half.max(0.5));
            prop_assert!(q <= p && p - q < f64::from(1u32 << k));
        }
    }

    #[test]
    fn ema_with_unit_beta_tracks_the_latest(obs in prop::collection::vec(0.0f64..100.0, 1..30)) {
        prop_assert_eq!(ema_of(&obs, 1.0), obs.last().copied());
    }

    #[test]
    fn ema_stays_within_observed_range(obs in prop::collection::vec(0.0f64..100.0, 1..30), beta in 0.0f64..=1.0) {
        let e = ema_of(&obs, beta).unwrap();
        let (lo, hi) = obs.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(e >= lo - 1e-9 && e <= hi + 1e-9);
    }

    #[test]
    fn critical_set_ignores_uniform_scaling(
        scores in prop::collection::vec(0.01f64..10.0, 1..8),
        factor in 0.001f64..1000.0,
        frac in 0.05f64..=1.0,
    ) {
        let named: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, &s)| (format!("l{i}"), s)).collect();
        let scaled: Vec<(String, f64)> = named.iter().map(|(n, s)| (n.clone(), s * factor)).collect();
        for mode in [ThresholdMode::TopFraction, ThresholdMode::Absolute] {
            prop_assert_eq!(
                select_critical(&named, mode, frac).unwrap(),
                select_critical(&scaled, mode, frac).unwrap()
            );
        }
        let (a, b) = (normalize(&named).unwrap(), normalize(&scaled).unwrap());
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attacks_respect_the_budget(seed in 0u64..10_000, eps in 0.0f64..0.3, kind_ix in 0usize..5) {
        let ds = synth_dataset(seed, 6, 3, 4).unwrap();
        let model = build_mlp(16, &[8], 3, seed).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        let x = ds.batch(&idx).unwrap();
        let labels = ds.batch_labels(&idx);
        let kind = AttackKind::ALL[kind_ix];
        let cfg = AttackConfig::new(kind, eps, seed);
        let check = |adv: &Tensor| -> Result<(), TestCaseError> {
            for (a, o) in adv.data().iter().zip(x.data()) {
                prop_assert!((a - o).abs() <= eps && (0.0..=1.0).contains(a));
            }
            Ok(())
        };
        if kind == AttackKind::Fgsm {
            check(&fgsm(&model, &x, &labels, eps).unwrap())?;
        } else {
            let mut seen = Vec::new();
            let adv = iterative_attack_observed(&model, &x, &labels, &cfg, |t| seen.push(t.clone())).unwrap();
            prop_assert_eq!(seen.len(), cfg.steps);
            for t in &seen {
                check(t)?;
            }
            check(&adv)?;
        }
    }
}

#[test]
fn ema_hand_fixtures() {
    // 1, then 0.3*2 + 0.7*1 = 1.3, then 0.3*3 + 0.7*1.3 = 1.81.
    assert!((ema_of(&[1.0, 2.0, 3.0], 0.3).unwrap() - 1.81).abs() < 1e-12);
    // 4, then 0.5*0 + 0.5*4 = 2, then 0.5*2 + 0.5*2 = 2.
    assert!((ema_of(&[4.0, 0.0, 2.0], 0.5).unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(ema_update(None, 7.5, 0.3), 7.5);
    assert_eq!(ema_of(&[5.0; 50], 0.3), Some(5.0));
    assert_eq!(ema_of(&[], 0.3), None);
}
