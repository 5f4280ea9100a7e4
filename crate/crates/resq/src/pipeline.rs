//! Stage sequencing with checkpoints, lineage checks and report emission.
//!
//! A run writes into one output directory:
//!
//! | file | content |
//! |---|---|
//! | `stage0.resq` … `stage3.resq` | checkpoints after each training stage |
//! | `criticality.csv` | per-layer scores and the critical set |
//! | `lineage.toml` | per-stage config lineage digest and artifact SHA-256 |
//! | `stage_accuracy.csv` | clean test accuracy: Baseline, BPFC, FA, Q-FA |
//! | `attacks.csv` | accuracy under each attack per model |
//! | `ber.csv` | mean/std accuracy per BER per model |
//! | `search_log.csv` | every bit-width probe |
//! | `run_report.toml` | stage reports including wall time |
//!
//! Everything except `run_report.toml` is a pure function of the config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use resq_core::bpfc::{bpfc_loss, train_bpfc};
use resq_core::criticality::{track_ema, CriticalityReport};
use resq_core::data::{synth_dataset, Dataset};
use resq_core::fault::{train_fault_aware, ReliabilityRow};
use resq_core::model::{build_cnn, build_mlp, Model};
use resq_core::quant::QuantizedModel;
use resq_core::rng::{derive_seed, stream};
use resq_core::search::{search_bit_width_with, Probe, SearchOutcome};
use resq_core::train::train_clean;

use crate::config::{Arch, DatasetSpec, RunConfig};
use crate::container::{load_container, load_float, save_container, Checkpoint};
use crate::error::{Error, Result};
use crate::idx::load_idx;
use crate::parallel;
use crate::report;

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Clean,
    Bpfc,
    Criticality,
    Fault,
    Quantize,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Self::Clean,
        Self::Bpfc,
        Self::Criticality,
        Self::Fault,
        Self::Quantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "stage0",
            Self::Bpfc => "stage1",
            Self::Criticality => "criticality",
            Self::Fault => "stage2",
            Self::Quantize => "stage3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn artifact(self) -> &'static str {
        match self {
            Self::Clean => "stage0.resq",
            Self::Bpfc => "stage1.resq",
            Self::Criticality => "criticality.csv",
            Self::Fault => "stage2.resq",
            Self::Quantize => "stage3.resq",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(spec: &DatasetSpec) -> Result<Data> {
    match spec {
        DatasetSpec::Synth {
            seed,
            train,
            test,
            classes,
            side,
        } => {
            let all = synth_dataset(*seed, train + test, *classes, *side)?;
            Ok(Data {
                train: all.subset(&(0..*train).collect::<Vec<_>>())?,
                test: all.subset(&(*train..train + test).collect::<Vec<_>>())?,
            })
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
        } => {
            let train = load_idx(train_images, train_labels, *classes)?;
            let test = load_idx(
                test_images,
                test_labels,
                Some(classes.unwrap_or(train.num_classes())),
            )?;
            if train.image_shape() != test.image_shape()
                || train.num_classes() != test.num_classes()
            {
                return Err(Error::Config(
                    "train and test IDX sets disagree on shape or classes".into(),
                ));
            }
            Ok(Data { train, test })
        }
    }
}

pub fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<Model> {
    let [c, h, w] = ds.image_shape();
    let m = &cfg.model;
    Ok(match m.arch {
        Arch::Mlp => build_mlp(c * h * w, &m.hidden, ds.num_classes(), m.seed)?,
        Arch::Cnn => {
            if h != w {
                return Err(Error::Config(format!(
                    "cnn needs square images, got {h}x{w}"
                )));
            }
            build_cnn(c, h, ds.num_classes(), m.seed)?
        }
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Lineage digest of every stage: each folds in its predecessor's digest
/// and the config sections the stage consumes.
pub fn lineage(cfg: &RunConfig) -> Vec<String> {
    let sections = [
        format!(
            "{}{}{}",
            RunConfig::section_toml(&cfg.dataset),
            RunConfig::section_toml(&cfg.model),
            RunConfig::section_toml(&cfg.stage0)
        ),
        RunConfig::section_toml(&cfg.stage1),
        RunConfig::section_toml(&cfg.criticality),
        RunConfig::section_toml(&cfg.stage2),
        RunConfig::section_toml(&cfg.stage3),
    ];
    let mut prev = String::new();
    Stage::ALL
        .iter()
        .zip(sections)
        .map(|(st, s)| {
            prev = sha256_hex(format!("{prev}\n[{}]\n{s}", st.name()).as_bytes());
            prev.clone()
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, rename = "stage")]
    pub stages: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub lineage: String,
    pub artifact: String,
    pub digest: String,
}

impl Manifest {
    pub const FILE: &'static str = "lineage.toml";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE);
        let text = toml::to_string(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn record(&mut self, entry: ManifestEntry) {
        self.stages.retain(|e| e.name != entry.name);
        self.stages.push(entry);
        self.stages
            .sort_by_key(|e| Stage::parse(&e.name).map_or(usize::MAX, Stage::index));
    }

    fn entry(&self, stage: Stage) -> Option<&ManifestEntry> {
        self.stages.iter().find(|e| e.name == stage.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub input_digest: Option<String>,
    pub output_digest: String,
    /// Clean test accuracy of the stage's output model, where one exists.
    pub accuracy: Option<f64>,
    pub wall_seconds: f64,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub reports: Vec<StageReport>,
    pub stage_accuracy: [f64; 4],
    pub critical: Vec<String>,
    pub search: SearchOutcome,
    pub attacks: Vec<report::AttackRow>,
    pub ber: Vec<(String, ReliabilityRow)>,
}

impl RunSummary {
    pub fn final_container(&self) -> PathBuf {
        self.out_dir.join(Stage::Quantize.artifact())
    }
}

struct Runner<'a> {
    dir: &'a Path,
    lineage: Vec<String>,
    manifest: Manifest,
    reports: Vec<StageReport>,
    last_good: Option<PathBuf>,
}

impl Runner<'_> {
    fn stage_failed(&self, e: Error) -> Error {
        Error::Stage {
            source: Box::new(e),
            checkpoint: self.last_good.clone(),
        }
    }

    /// Verifies a completed stage against the manifest and the config.
    fn verify(&mut self, stage: Stage) -> Result<PathBuf> {
        let entry = self.manifest.entry(stage).ok_or_else(|| {
            Error::Lineage(format!(
                "no record of {} in {}",
                stage.name(),
                Manifest::FILE
            ))
        })?;
        if entry.lineage != self.lineage[stage.index()] {
            return Err(Error::Lineage(format!(
                "{} was produced under a different configuration",
                stage.name()
            )));
        }
        let path = self.dir.join(&entry.artifact);
        let digest = file_digest(&path)?;
        if digest != entry.digest {
            return Err(Error::Lineage(format!(
                "{} digest changed since it was recorded",
                path.display()
            )));
        }
        self.last_good = Some(path.clone());
        Ok(path)
    }

    fn commit(
        &mut self,
        stage: Stage,
        input: Option<String>,
        accuracy: Option<f64>,
        started: Instant,
    ) -> Result<String> {
        let path = self.dir.join(stage.artifact());
        let digest = file_digest(&path)?;
        self.manifest.record(ManifestEntry {
            name: stage.name().into(),
            lineage: self.lineage[stage.index()].clone(),
            artifact: stage.artifact().into(),
            digest: digest.clone(),
        });
        self.manifest.save(self.dir)?;
        self.last_good = Some(path);
        self.reports.push(StageReport {
            stage: stage.name().into(),
            input_digest: input,
            output_digest: digest.clone(),
            accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        Ok(digest)
    }

    fn float_stage(
        &mut self,
        stage: Stage,
        from: Stage,
        input: Option<String>,
        test: &Dataset,
        run: impl FnOnce() -> Result<Model>,
    ) -> Result<(Model, String)> {
        if stage < from {
            let path = self.verify(stage)?;
            let model = load_float(&path)?;
            let digest = self.manifest.entry(stage).expect("verified").digest.clone();
            return Ok((model, digest));
        }
        let started = Instant::now();
        let model = run().map_err(|e| self.stage_failed(e))?;
        save_container(
            &self.dir.join(stage.artifact()),
            &Checkpoint::Float(model.clone()),
        )?;
        let accuracy = model.accuracy(test)?;
        let digest = self.commit(stage, input, Some(accuracy), started)?;
        Ok((model, digest))
    }
}

/// Runs every stage from scratch.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    resume(cfg, out_dir, Stage::Clean)
}

/// Reuses the recorded artifacts of every stage before `from` (after
/// checking their lineage and digests) and recomputes the rest.
pub fn resume(cfg: &RunConfig, out_dir: &Path, from: Stage) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = if from == Stage::Clean {
        Manifest::default()
    } else {
        Manifest::load(out_dir)?
    };
    let mut r = Runner {
        dir: out_dir,
        lineage: lineage(cfg),
        manifest,
        reports: Vec::new(),
        last_good: None,
    };
    let data = load_data(&cfg.dataset)?;
    let (train, test) = (&data.train, &data.test);

    let (clean, clean_digest) = r.float_stage(Stage::Clean, from, None, test, || {
        let mut m = build_model(cfg, train)?;
        train_clean(&mut m, train, &cfg.clean())?;
        Ok(m)
    })?;

    let (bpfc, bpfc_digest) = r.float_stage(Stage::Bpfc, from, Some(clean_digest), test, || {
        let mut m = clean.clone();
        train_bpfc(&mut m, train, &cfg.bpfc())?;
        Ok(m)
    })?;

    let report = if Stage::Criticality < from {
        let path = r.verify(Stage::Criticality)?;
        report::read_criticality(&path, cfg.criticality())?
    } else {
        let started = Instant::now();
        let rep = analyze_critical(cfg, &bpfc, train).map_err(|e| r.stage_failed(e))?;
        report::write_criticality(&out_dir.join(Stage::Criticality.artifact()), &rep)?;
        r.commit(Stage::Criticality, Some(bpfc_digest.clone()), None, started)?;
        rep
    };

    let (fa, fa_digest) = r.float_stage(Stage::Fault, from, Some(bpfc_digest), test, || {
        let mut m = bpfc.clone();
        train_fault_aware(
            &mut m,
            train,
            &report.critical,
            &cfg.fault_train(),
            &cfg.stage2_fault(),
        )?;
        Ok(m)
    })?;

    // Stage 3 is always recomputed from the verified Stage 2 model; the
    // search log is needed for the reports.
    let started = Instant::now();
    let search = quantize_search(cfg, &fa, test).map_err(|e| r.stage_failed(e))?;
    save_container(
        &out_dir.join(Stage::Quantize.artifact()),
        &Checkpoint::Quantized(search.model.clone()),
    )?;
    let q_model = search.model.dequantize()?;
    let q_acc = q_model.accuracy(test)?;
    r.commit(Stage::Quantize, Some(fa_digest), Some(q_acc), started)?;
    report::write_search_log(&out_dir.join("search_log.csv"), &search.log)?;

    let stage_accuracy = [
        clean.accuracy(test)?,
        bpfc.accuracy(test)?,
        fa.accuracy(test)?,
        q_acc,
    ];
    report::write_stage_accuracy(&out_dir.join("stage_accuracy.csv"), &stage_accuracy)?;

    let baseline_q = QuantizedModel::quantize(&clean, search.bits)?;
    let (attacks, ber) = evaluate(cfg, test, &clean, &bpfc, &fa, &search.model, &baseline_q)?;
    report::write_attacks(&out_dir.join("attacks.csv"), &attacks)?;
    report::write_ber(&out_dir.join("ber.csv"), &ber)?;

    let summary = RunSummary {
        out_dir: out_dir.to_path_buf(),
        reports: r.reports,
        stage_accuracy,
        critical: report.critical.clone(),
        search,
        attacks,
        ber,
    };
    report::write_run_report(&out_dir.join("run_report.toml"), &summary)?;
    Ok(summary)
}

/// Criticality on the Stage 1 model, measured with the Stage 1 objective.
pub fn analyze_critical(
    cfg: &RunConfig,
    model: &Model,
    train: &Dataset,
) -> Result<CriticalityReport> {
    let b = cfg.bpfc();
    let seed = cfg.criticality.seed;
    let noise = stream(seed, "criticality-noise");
    Ok(track_ema(
        model,
        train,
        &cfg.criticality(),
        seed,
        |m, tape, bound, idx, t| {
            let x = train.batch(idx)?;
            let labels = train.batch_labels(idx);
            let terms = bpfc_loss(
                m,
                tape,
                bound,
                &x,
                &labels,
                b.lsb_bits,
                b.consistency_weight,
                derive_seed(noise, t as u64),
            )?;
            Ok(terms.total)
        },
    )?)
}

/// Stage 3 search with reliability trials in parallel. Accuracy and
/// reliability are measured on `ds`.
pub fn quantize_search(cfg: &RunConfig, fa: &Model, ds: &Dataset) -> Result<SearchOutcome> {
    let scfg = cfg.search(fa.accuracy(ds)?);
    let mut failure = None;
    let out = search_bit_width_with(fa, ds, &scfg, |q| {
        match parallel::evaluate_reliability(q, ds, &[scfg.eval_ber], scfg.trials, cfg.stage3.seed)
        {
            Ok(rows) => Ok(rows[0].mean_accuracy),
            Err(e) => {
                let msg = e.to_string();
                failure = Some(e);
                Err(resq_core::Error::Contract(msg))
            }
        }
    });
    match (out, failure) {
        (Ok(o), _) => Ok(o),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
    }
}

/// Attack rows and per-model BER curves.
type Evaluation = (Vec<report::AttackRow>, Vec<(String, ReliabilityRow)>);

#[allow(clippy::too_many_arguments)]
fn evaluate(
    cfg: &RunConfig,
    test: &Dataset,
    clean: &Model,
    bpfc: &Model,
    fa: &Model,
    q_fa: &QuantizedModel,
    baseline_q: &QuantizedModel,
) -> Result<Evaluation> {
    let attacks = cfg.attacks();
    let q_fa_model = q_fa.dequantize()?;
    let baseline_q_model = baseline_q.dequantize()?;
    let models: [(&str, &Model); 5] = [
        ("baseline", clean),
        ("bpfc", bpfc),
        ("fa", fa),
        ("q_fa", &q_fa_model),
        ("baseline_q", &baseline_q_model),
    ];
    let mut rows = Vec::new();
    for (name, m) in models {
        let mut accs = Vec::with_capacity(attacks.len());
        for a in &attacks {
            accs.push((
                a.kind,
                parallel::attack_accuracy(m, test, a, cfg.eval.batch_size)?,
            ));
        }
        rows.push(report::AttackRow {
            model: name.into(),
            epsilon: cfg.eval.epsilon,
            clean: m.accuracy(test)?,
            accuracies: accs,
        });
    }
    let e = &cfg.eval;
    let mut ber = Vec::new();
    for (name, q) in [("baseline_q", baseline_q), ("q_fa", q_fa)] {
        for row in parallel::evaluate_reliability(q, test, &e.bers, e.trials, e.fault_seed)? {
            ber.push((name.to_string(), row));
        }
    }
    Ok((rows, ber))
}

/// Human-readable digest of an output directory's CSV tables.
pub fn render_report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    for name in [
        "stage_accuracy.csv",
        "criticality.csv",
        "search_log.csv",
        "attacks.csv",
        "ber.csv",
    ] {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(out, "== {name}");
        out.push_str(&text);
        out.push('\n');
    }
    if let Ok(Checkpoint::Quantized(q)) = load_container(&dir.join(Stage::Quantize.artifact())) {
        let _ = writeln!(
            out,
            "final model: b={} n_msb={} storage={} bytes",
            q.bits().unwrap_or(0),
            q.n_msb().unwrap_or(0),
            q.storage_bytes()
        );
    }
    Ok(out)
}

/// Probe rows of a search log, for callers that only need the trace.
pub fn probes(summary: &RunSummary) -> &[Probe] {
    &summary.search.log
}
