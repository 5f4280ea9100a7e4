//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Tolerances are pinned here.

#[path = "../../core/tests/support/mod.rs"]
#[allow(dead_code)]
mod support;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::Rng as _;

use resq::config::{RunConfig, REFERENCE_TOML};
use resq::parallel;
use resq::pipeline::{run_pipeline, RunSummary};
use resq::report::{read_stage_accuracy, STAGE_NAMES};
use resq_core::attack::{
    attack_batch, fgsm, iterative_attack, iterative_attack_observed, AttackConfig, AttackKind,
};
use resq_core::bpfc::{bpfc_transform, noise_half_width};
use resq_core::criticality::{ema_of, track_ema, CriticalityConfig, ThresholdMode};
use resq_core::data::synth_dataset;
use resq_core::fault::flip_bits;
use resq_core::model::{build_mlp, Layer, LayerKind};
use resq_core::quant::{dequantize_value, quantize_values, QuantizedLayer};
use resq_core::rng::rng_from;
use resq_core::search::is_bisection_trace;
use resq_core::train::{train_clean, CleanConfig};
use resq_core::Tensor;

/// Criterion 1: largest admissible relative gradient error.
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 100;
/// Criterion 3: relative band around 3p^2 - 2p^3.
const TMR_REL_TOL: f64 = 0.10;
/// Criterion 6: fixture tolerance.
const EMA_TOL: f64 = 1e-12;
/// Criteria 8-10: independent replicas of the reference run, as seed
/// offsets, and how many must show the trend.
const TREND_OFFSETS: [u64; 5] = [0, 1, 2, 3, 4];
const TREND_QUORUM: usize = 4;
/// Criterion 8: training-time fault rate at which stages are compared.
const STAGE_BER: f64 = 1e-3;
/// Criterion 11: largest clean-accuracy drop per stage.
const STAGE_DROP: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn gradient_correctness() -> Outcome {
    let worst = (0..GRAD_SEEDS)
        .map(|seed| {
            let (m, x, t) = support::random_case(seed);
            support::max_gradient_error(&m, &x, &t)
        })
        .fold(0.0, f64::max);
    outcome(
        worst < GRAD_REL_TOL,
        format!("{GRAD_SEEDS} seeds, max relative error {worst:.2e} (< {GRAD_REL_TOL:e})"),
    )
}

fn quantization_round_trip() -> Outcome {
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for (i, bits) in [2u32, 4, 8, 12].into_iter().enumerate() {
        let mut rng = rng_from(500 + i as u64);
        let w: Vec<f64> = (0..10_000).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (codes, s, x_min) = quantize_values(&w, bits).unwrap();
        for (&v, &c) in w.iter().zip(&codes) {
            let err = (dequantize_value(c, s, x_min) - v).abs();
            worst = worst.max(err / (s / 2.0));
            // One part in 1e9 absorbs floating-point rounding of x_min + c*s.
            if err > s / 2.0 * (1.0 + 1e-9) {
                violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!("b in {{2,4,8,12}} x 1e4 weights: {violations} violations, max |err|/(s/2) = {worst:.6}"),
    )
}

fn tmr_analytics() -> Outcome {
    let (rows, cols) = (15_625, 8);
    let mut rng = rng_from(3);
    let w: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let layer = Layer::with_params(
        "fc",
        LayerKind::Dense,
        Tensor::new(vec![rows, cols], w).unwrap(),
        Tensor::zeros(vec![cols]),
    );
    let q = QuantizedLayer::from_layer(&layer, 8)
        .unwrap()
        .protect_msbs(8)
        .unwrap();
    let clean = q.voted_codes().unwrap();
    let p: f64 = 0.05;
    let voted = q.with_faults(p, 11).unwrap().0.voted_codes().unwrap();
    let wrong: u32 = clean
        .iter()
        .zip(&voted)
        .map(|(a, b)| (a ^ b).count_ones())
        .sum();
    let total = clean.len() as f64 * 8.0;
    let rate = f64::from(wrong) / total;
    let expect = 3.0 * p * p - 2.0 * p.powi(3);
    let rel = (rate / expect - 1.0).abs();
    outcome(
        rel <= TMR_REL_TOL && total >= 1e6,
        format!(
            "{total} protected bits: post-vote rate {rate:.5} vs {expect:.5} ({:.1}% off)",
            rel * 100.0
        ),
    )
}

fn flip_calibration() -> Outcome {
    let words = vec![0u32; 125_000];
    let n = (words.len() * 8) as f64;
    let mut pass = true;
    let mut detail = Vec::new();
    for (i, ber) in [1e-4, 1e-3, 1e-2].into_iter().enumerate() {
        let (_, flips) = flip_bits(&words, 8, ber, 90 + i as u64);
        let rate = flips as f64 / n;
        let half = 3.0 * (ber * (1.0 - ber) / n).sqrt();
        pass &= (rate - ber).abs() <= half;
        detail.push(format!("{ber:e}: {rate:.3e} (+-{half:.1e})"));
    }
    outcome(pass, format!("{n} bits; {}", detail.join(", ")))
}

fn bit_plane_exactness() -> Outcome {
    let x = Tensor::new(vec![256], (0..256).map(|l| f64::from(l) / 255.0).collect()).unwrap();
    let mut bad = 0;
    let mut checked = 0;
    for k in 1..=7u32 {
        let half = noise_half_width(k);
        for draw in 0..100 {
            let (pre, q) = bpfc_transform(&x, k, 7000 + u64::from(k) * 1000 + draw).unwrap();
            for (level, (p, q)) in pre.data().iter().zip(q.data()).enumerate() {
                let (p, q) = ((p * 255.0).round(), (q * 255.0).round());
                let level = level as f64;
                if !(q as u32).is_multiple_of(1 << k) {
                    bad += 1;
                }
                let interior = level >= half && level <= 255.0 - half;
                if interior && (p - level).abs() > half {
                    bad += 1;
                }
                checked += 1;
            }
        }
    }
    outcome(
        bad == 0,
        format!("k=1..7 x 256 levels x 100 draws = {checked} pixels, {bad} violations"),
    )
}

fn ema_recurrence() -> Outcome {
    let fixtures = [
        (ema_of(&[1.0, 2.0, 3.0], 0.3).unwrap(), 1.81),
        (ema_of(&[4.0, 0.0, 2.0], 0.5).unwrap(), 2.0),
        (ema_of(&[0.5, 9.0, 2.25], 1.0).unwrap(), 2.25),
        (ema_of(&[3.5; 40], 0.3).unwrap(), 3.5),
    ];
    let fixture_err = fixtures
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let ds = synth_dataset(21, 200, 4, 6).unwrap();
    let model = build_mlp(36, &[10, 8], 4, 21).unwrap();
    let cfg = CriticalityConfig {
        window: 5,
        mode: ThresholdMode::TopFraction,
        threshold: 0.5,
        ..Default::default()
    };
    let run = |factor: f64| {
        track_ema(&model, &ds, &cfg, 4, |m, tape, bound, idx, _| {
            let xv = tape.leaf(ds.batch(idx)?);
            let logits = m.forward_bound(tape, bound, xv)?;
            let t = resq_core::data::one_hot(&ds.batch_labels(idx), ds.num_classes());
            let l = tape.cross_entropy(logits, &t)?;
            Ok(tape.scale(l, factor))
        })
        .unwrap()
    };
    let (a, b) = (run(1.0), run(37.0));
    let norm_err = a
        .normalized
        .iter()
        .zip(&b.normalized)
        .map(|((_, x), (_, y))| (x - y).abs())
        .fold(0.0, f64::max);
    let same_set = a.critical == b.critical;
    outcome(
        fixture_err <= EMA_TOL && same_set && norm_err < 1e-12,
        format!(
            "fixtures max err {fixture_err:.1e}; x37 gradient scaling: same L_c {:?} = {same_set}, normalized diff {norm_err:.1e}",
            a.critical
        ),
    )
}

fn attack_collapse() -> Outcome {
    let ds = synth_dataset(31, 2200, 10, 8).unwrap();
    let train = ds.subset(&(0..200).collect::<Vec<_>>()).unwrap();
    let mut model = build_mlp(64, &[32, 16], 10, 31).unwrap();
    let cc = CleanConfig {
        epochs: 3,
        lr: 0.05,
        alpha: 1.0,
        batch_size: 32,
        seed: 31,
    };
    train_clean(&mut model, &train, &cc).unwrap();
    let idx: Vec<usize> = (200..2200).collect();
    let x = ds.batch(&idx).unwrap();
    let labels = ds.batch_labels(&idx);

    let eps = 0.1;
    let pgd1 = AttackConfig {
        steps: 1,
        step_size: Some(eps),
        random_start: false,
        ..AttackConfig::new(AttackKind::Pgd, eps, 5)
    };
    let collapse = bits(&iterative_attack(&model, &x, &labels, &pgd1).unwrap())
        == bits(&fgsm(&model, &x, &labels, eps).unwrap());

    let identity = AttackKind::ALL.iter().all(|&k| {
        let cfg = AttackConfig::new(k, 0.0, 5);
        bits(&attack_batch(&model, &x, &labels, &cfg, 0).unwrap()) == bits(&x)
    });

    let (mut inputs, mut worst) = (0usize, 0.0f64);
    let mut in_range = true;
    let mut check = |adv: &Tensor| {
        for (a, o) in adv.data().iter().zip(x.data()) {
            worst = worst.max((a - o).abs());
            in_range &= (0.0..=1.0).contains(a);
        }
    };
    for &kind in &AttackKind::ALL {
        let cfg = AttackConfig::new(kind, eps, 5);
        if kind == AttackKind::Fgsm {
            check(&fgsm(&model, &x, &labels, eps).unwrap());
        } else {
            iterative_attack_observed(&model, &x, &labels, &cfg, |t| check(t)).unwrap();
        }
        inputs += idx.len();
    }
    let budget = worst <= eps && in_range;
    outcome(
        collapse && identity && budget && inputs >= 10_000,
        format!(
            "1-step PGD == FGSM bitwise: {collapse}; eps=0 identity (5 attacks): {identity}; {inputs} attacked inputs, max |delta| {worst} <= {eps}: {budget}"
        ),
    )
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

struct Replica {
    offset: u64,
    summary: RunSummary,
    bpfc_ber: f64,
    fa_ber: f64,
}

fn fgsm_of(s: &RunSummary, model: &str) -> f64 {
    s.attacks
        .iter()
        .find(|r| r.model == model)
        .and_then(|r| r.accuracy(AttackKind::Fgsm))
        .expect("fgsm column")
}

fn ber_of(s: &RunSummary, model: &str, ber: f64) -> f64 {
    s.ber
        .iter()
        .find(|(m, r)| m == model && r.ber == ber)
        .map(|(_, r)| r.mean_accuracy)
        .expect("ber row")
}

fn replicate(reference: &RunConfig, root: &Path) -> Vec<Replica> {
    TREND_OFFSETS
        .iter()
        .map(|&offset| {
            let cfg = reference.with_seed_offset(offset);
            let dir = root.join(format!("offset{offset}"));
            let summary = run_pipeline(&cfg, &dir).unwrap();
            let data = resq::pipeline::load_data(&cfg.dataset).unwrap();
            let rel = |file: &str| {
                let m = resq::container::load_float(&dir.join(file)).unwrap();
                parallel::evaluate_reliability(
                    &m,
                    &data.test,
                    &[STAGE_BER],
                    cfg.eval.trials,
                    cfg.eval.fault_seed,
                )
                .unwrap()[0]
                    .mean_accuracy
            };
            Replica {
                offset,
                bpfc_ber: rel("stage1.resq"),
                fa_ber: rel("stage2.resq"),
                summary,
            }
        })
        .collect()
}

fn tally(rows: &[(u64, bool, String)]) -> Outcome {
    let passed = rows.iter().filter(|r| r.1).count();
    let detail = rows
        .iter()
        .map(|(o, p, d)| format!("[{o}{} {d}]", if *p { "" } else { " x" }))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        passed >= TREND_QUORUM,
        format!("{passed}/{} seeds: {detail}", rows.len()),
    )
}

fn stage_fault_trend(reps: &[Replica]) -> Outcome {
    tally(
        &reps
            .iter()
            .map(|r| {
                (
                    r.offset,
                    r.fa_ber > r.bpfc_ber,
                    format!("FA {:.4} vs BPFC {:.4}", r.fa_ber, r.bpfc_ber),
                )
            })
            .collect::<Vec<_>>(),
    )
}

fn stage_attack_trend(reps: &[Replica]) -> Outcome {
    tally(
        &reps
            .iter()
            .map(|r| {
                let s = &r.summary;
                let (c, b, f) = (fgsm_of(s, "baseline"), fgsm_of(s, "bpfc"), fgsm_of(s, "fa"));
                (
                    r.offset,
                    b > c && f >= b,
                    format!("{c:.4} < {b:.4} <= {f:.4}"),
                )
            })
            .collect::<Vec<_>>(),
    )
}

fn end_to_end_trend(reps: &[Replica], top_ber: f64) -> Outcome {
    tally(
        &reps
            .iter()
            .map(|r| {
                let s = &r.summary;
                let (fq, fb) = (fgsm_of(s, "q_fa"), fgsm_of(s, "baseline_q"));
                let (bq, bb) = (ber_of(s, "q_fa", top_ber), ber_of(s, "baseline_q", top_ber));
                (
                    r.offset,
                    fq > fb && bq > bb,
                    format!(
                        "b={} fgsm {fq:.4}>{fb:.4} ber {bq:.4}>{bb:.4}",
                        s.search.bits
                    ),
                )
            })
            .collect::<Vec<_>>(),
    )
}

fn search_and_schema(reference: &RunConfig, rep: &Replica, dir: &Path) -> Outcome {
    let s = &rep.summary;
    let scfg = reference.search(s.stage_accuracy[2]);
    let probes = s.search.log.len();
    let bound = scfg.max_probes();
    let trace = is_bisection_trace(&s.search.log, scfg.min_bits, scfg.max_bits);
    let path = dir.join("offset0/stage_accuracy.csv");
    let header_ok = fs::read_to_string(&path)
        .map(|t| t.lines().next() == Some(STAGE_NAMES.join(",").as_str()))
        .unwrap_or(false);
    let acc = read_stage_accuracy(&path).unwrap();
    let drops: Vec<f64> = acc.windows(2).map(|w| w[0] - w[1]).collect();
    let monotone_cost = drops.iter().all(|&d| d <= STAGE_DROP);
    outcome(
        probes <= bound && trace && header_ok && monotone_cost,
        format!(
            "probes {probes} <= {bound}; bisection trace {trace}; header {header_ok}; accuracy {acc:?}, per-stage drops {drops:.4?} <= {STAGE_DROP}"
        ),
    )
}

fn determinism(config_path: &Path, root: &Path) -> Outcome {
    let run = |name: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_resq"))
            .args(["run-all", "-c"])
            .arg(config_path)
            .arg("-o")
            .arg(root.join(name))
            .output()
            .unwrap();
        out.status.success()
    };
    if !(run("a") && run("b")) {
        return outcome(false, "run-all failed");
    }
    let files = [
        "stage0.resq",
        "stage1.resq",
        "stage2.resq",
        "stage3.resq",
        "lineage.toml",
        "stage_accuracy.csv",
        "criticality.csv",
        "search_log.csv",
        "attacks.csv",
        "ber.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(root.join("a").join(f)).ok() != fs::read(root.join("b").join(f)).ok())
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "{} artifacts compared, differing: {differing:?}",
            files.len()
        ),
    )
}

fn main() -> ExitCode {
    let reference = RunConfig::from_toml(REFERENCE_TOML).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut timed = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        results.push((id, name, o, secs));
    };

    timed(1, "gradient correctness", &mut gradient_correctness);
    timed(2, "quantization round-trip", &mut quantization_round_trip);
    timed(3, "TMR analytics", &mut tmr_analytics);
    timed(4, "fault-mask calibration", &mut flip_calibration);
    timed(5, "bit-plane transform exactness", &mut bit_plane_exactness);
    timed(6, "EMA recurrence", &mut ema_recurrence);
    timed(7, "attack collapse cases", &mut attack_collapse);

    let t = Instant::now();
    let reps = replicate(&reference, tmp.path());
    let replicate_secs = t.elapsed().as_secs_f64();
    let top_ber = reference.eval.bers.iter().copied().fold(f64::MIN, f64::max);
    timed(8, "stage trend: fault resilience", &mut || {
        stage_fault_trend(&reps)
    });
    timed(9, "stage trend: FGSM resilience", &mut || {
        stage_attack_trend(&reps)
    });
    timed(
        10,
        "end-to-end trend: Q-FA vs quantized baseline",
        &mut || end_to_end_trend(&reps, top_ber),
    );
    timed(11, "binary search and stage table", &mut || {
        search_and_schema(&reference, &reps[0], tmp.path())
    });

    let config_path = tmp.path().join("reference.toml");
    fs::write(&config_path, REFERENCE_TOML).unwrap();
    timed(12, "determinism", &mut || {
        determinism(&config_path, &tmp.path().join("det"))
    });

    println!();
    println!(
        "acceptance: {} reference replicas in {replicate_secs:.1}s",
        TREND_OFFSETS.len()
    );
    let mut failed = 0;
    for (id, name, o, secs) in &results {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!(
            "criterion {id:>2} {verdict} {name} ({secs:.1}s): {}",
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
