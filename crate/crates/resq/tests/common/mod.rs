use std::path::Path;

use resq::config::{DatasetSpec, RunConfig, REFERENCE_TOML};

/// The reference configuration shrunk to run in about a second.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::from_toml(REFERENCE_TOML).unwrap();
    cfg.dataset = DatasetSpec::Synth {
        seed: 7,
        train: 240,
        test: 120,
        classes: 4,
        side: 6,
    };
    cfg.model.hidden = vec![12];
    cfg.stage0.epochs = 4;
    cfg.stage1.epochs = 2;
    cfg.criticality.window = 4;
    cfg.stage2.epochs = 2;
    cfg.stage2.realizations = 2;
    cfg.stage3.trials = 3;
    cfg.eval.steps = 3;
    cfg.eval.trials = 3;
    cfg.eval.bers = vec![0.0, 0.01];
    cfg
}

#[allow(dead_code)]
pub fn write_config(cfg: &RunConfig, path: &Path) {
    std::fs::write(path, toml::to_string(cfg).unwrap()).unwrap();
}
