//! Run configuration. Every stochastic component names its seed
//! explicitly; a missing seed or an unknown key is an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use resq_core::attack::{AttackConfig, AttackKind};
use resq_core::bpfc::BpfcConfig;
use resq_core::criticality::{CriticalityConfig, ThresholdMode};
use resq_core::fault::{FaultConfig, FaultTrainConfig};
use resq_core::search::QuantSearchConfig;
use resq_core::train::CleanConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub stage0: Stage0,
    pub stage1: Stage1,
    pub criticality: Criticality,
    pub stage2: Stage2,
    pub stage3: Stage3,
    pub eval: Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated blobs; the first `train` samples train, the next `test` evaluate.
    Synth {
        seed: u64,
        train: usize,
        test: usize,
        classes: usize,
        side: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Hidden widths of the MLP; ignored by the CNN.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage0 {
    pub epochs: usize,
    pub lr: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1 {
    pub lsb_bits: u32,
    pub consistency_weight: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TopFraction,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Criticality {
    pub ema_beta: f64,
    pub window: usize,
    pub mode: Mode,
    pub value: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2 {
    pub consistency_weight: f64,
    pub realizations: usize,
    pub ber: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub fault_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage3 {
    pub bit_range: [u32; 2],
    /// Absolute accuracy requirement `a`.
    pub accuracy_threshold: Option<f64>,
    /// Alternative to `accuracy_threshold`: `a` is the Stage 2 model's test
    /// accuracy minus this margin.
    pub accuracy_drop: Option<f64>,
    pub reliability_threshold: f64,
    pub eval_ber: f64,
    pub trials: usize,
    pub n_msb: u32,
    pub n_msb_max: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Eval {
    pub attacks: Vec<String>,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub attack_seed: u64,
    pub bers: Vec<f64>,
    pub trials: usize,
    pub fault_seed: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical serialization used for lineage digests.
    pub fn section_toml<T: Serialize>(section: &T) -> String {
        toml::to_string(section).expect("config sections serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let DatasetSpec::Synth {
            classes,
            side,
            train,
            ..
        } = &self.dataset
        {
            if *classes < 2 || *side == 0 || *train == 0 {
                return bad("synthetic dataset needs classes >= 2, side >= 1, train >= 1".into());
            }
        }
        if self.model.arch == Arch::Mlp && self.model.hidden.is_empty() {
            return bad("mlp needs at least one hidden width".into());
        }
        let s3 = &self.stage3;
        if s3.accuracy_threshold.is_some() == s3.accuracy_drop.is_some() {
            return bad("stage3 needs exactly one of accuracy_threshold and accuracy_drop".into());
        }
        if self
            .eval
            .attacks
            .iter()
            .any(|a| AttackKind::parse(a).is_none())
        {
            return bad(format!("unknown attack in {:?}", self.eval.attacks));
        }
        if self.eval.bers.is_empty() {
            return bad("eval.bers must list at least one rate".into());
        }
        if self.stage0.batch_size == 0 || !(self.stage0.alpha > 0.0) {
            return bad("stage0 needs batch_size >= 1 and alpha > 0".into());
        }
        self.bpfc().validate()?;
        self.criticality().validate()?;
        self.fault_train().validate()?;
        self.stage2_fault().validate()?;
        self.search(0.0).validate()?;
        for a in self.attacks() {
            a.validate()?;
        }
        Ok(())
    }

    /// The same configuration with every seed shifted by `offset`, for
    /// replicating a run over independent draws.
    pub fn with_seed_offset(&self, offset: u64) -> Self {
        let mut c = self.clone();
        let shift = |s: &mut u64| *s = s.wrapping_add(offset);
        if let DatasetSpec::Synth { seed, .. } = &mut c.dataset {
            shift(seed);
        }
        for s in [
            &mut c.model.seed,
            &mut c.stage0.seed,
            &mut c.stage1.seed,
            &mut c.criticality.seed,
            &mut c.stage2.seed,
            &mut c.stage2.fault_seed,
            &mut c.stage3.seed,
            &mut c.eval.attack_seed,
            &mut c.eval.fault_seed,
        ] {
            shift(s);
        }
        c
    }

    pub fn clean(&self) -> CleanConfig {
        let s = &self.stage0;
        CleanConfig {
            epochs: s.epochs,
            lr: s.lr,
            alpha: s.alpha,
            batch_size: s.batch_size,
            seed: s.seed,
        }
    }

    pub fn bpfc(&self) -> BpfcConfig {
        let s = &self.stage1;
        BpfcConfig {
            lsb_bits: s.lsb_bits,
            consistency_weight: s.consistency_weight,
            epochs: s.epochs,
            lr: s.lr,
            batch_size: s.batch_size,
            seed: s.seed,
        }
    }

    pub fn criticality(&self) -> CriticalityConfig {
        let c = &self.criticality;
        CriticalityConfig {
            ema_beta: c.ema_beta,
            window: c.window,
            mode: match c.mode {
                Mode::TopFraction => ThresholdMode::TopFraction,
                Mode::Absolute => ThresholdMode::Absolute,
            },
            threshold: c.value,
            batch_size: c.batch_size,
        }
    }

    pub fn fault_train(&self) -> FaultTrainConfig {
        let s = &self.stage2;
        FaultTrainConfig {
            consistency_weight: s.consistency_weight,
            realizations: s.realizations,
            epochs: s.epochs,
            lr: s.lr,
            batch_size: s.batch_size,
            seed: s.seed,
        }
    }

    pub fn stage2_fault(&self) -> FaultConfig {
        FaultConfig::new(self.stage2.ber, self.stage2.fault_seed)
    }

    /// Search settings given the Stage 2 model's test accuracy.
    pub fn search(&self, fa_accuracy: f64) -> QuantSearchConfig {
        let s = &self.stage3;
        let a = s
            .accuracy_threshold
            .unwrap_or_else(|| (fa_accuracy - s.accuracy_drop.unwrap_or(0.0)).clamp(0.0, 1.0));
        QuantSearchConfig {
            min_bits: s.bit_range[0],
            max_bits: s.bit_range[1],
            accuracy_threshold: a,
            reliability_threshold: s.reliability_threshold,
            eval_ber: s.eval_ber,
            trials: s.trials,
            n_msb: s.n_msb,
            n_msb_max: s.n_msb_max,
        }
    }

    pub fn attacks(&self) -> Vec<AttackConfig> {
        let e = &self.eval;
        e.attacks
            .iter()
            .filter_map(|a| AttackKind::parse(a))
            .map(|kind| AttackConfig {
                steps: if kind == AttackKind::Fgsm { 1 } else { e.steps },
                ..AttackConfig::new(kind, e.epsilon, e.attack_seed)
            })
            .collect()
    }
}

/// The desk-scale reference configuration.
pub const REFERENCE_TOML: &str = include_str!("../configs/reference.toml");
