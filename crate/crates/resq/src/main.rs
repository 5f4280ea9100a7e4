use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use resq::config::RunConfig;
use resq::container::{load_container, load_float, save_container, Checkpoint};
use resq::error::{Error, Result};
use resq::pipeline::{self, Stage};
use resq::{parallel, report};
use resq_core::bpfc::train_bpfc;
use resq_core::fault::train_fault_aware;
use resq_core::quant::QuantizedModel;
use resq_core::train::train_clean;

#[derive(Parser)]
#[command(
    name = "resq",
    version,
    about = "Staged training and evaluation of attack- and fault-resilient quantized networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 0: mixup training from a fresh model.
    TrainClean {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Stage 1: bit-plane feature consistency fine-tuning.
    TrainBpfc {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Per-layer EMA gradient-norm scores and the critical set, as CSV.
    AnalyzeCritical {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Stage 2: fault-aware fine-tuning with the critical layers frozen.
    TrainFault {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        /// Criticality CSV from `analyze-critical`.
        #[arg(long)]
        critical: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Stage 3: bit-width search with MSB protection, or a fixed width.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Skip the search and quantize at this width.
        #[arg(long)]
        bits: Option<u32>,
        /// Protected MSBs when `--bits` is given.
        #[arg(long, default_value_t = 0, requires = "bits")]
        n_msb: u32,
        /// Where to write the probe log of the search.
        #[arg(long, conflicts_with = "bits")]
        log: Option<PathBuf>,
    },
    /// Accuracy under the configured attacks.
    AttackEval {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to evaluate; each row is named after the file stem.
        #[arg(long = "model", short, required = true)]
        models: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Mean and spread of accuracy over the configured BER sweep.
    FaultEval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "model", short, required = true)]
        models: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Every stage, checkpoints and tables into one directory.
    RunAll {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
        /// Reuse verified artifacts of the stages before this one
        /// (stage1, criticality, stage2 or stage3).
        #[arg(long, value_parser = parse_stage)]
        resume_from: Option<Stage>,
    },
    /// Print the tables of a `run-all` directory.
    Report {
        #[arg(long, short)]
        dir: PathBuf,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| {
        let names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

fn run(cmd: Command) -> Result<()> {
    let load = |c: &Common| RunConfig::load(&c.config);
    match cmd {
        Command::TrainClean { common, out } => {
            let cfg = load(&common)?;
            let data = pipeline::load_data(&cfg.dataset)?;
            let mut m = pipeline::build_model(&cfg, &data.train)?;
            for e in train_clean(&mut m, &data.train, &cfg.clean())? {
                eprintln!(
                    "epoch {}: loss {:.4} train acc {:.4}",
                    e.epoch, e.loss, e.val_accuracy
                );
            }
            save_container(&out, &Checkpoint::Float(m.clone()))?;
            println!("test accuracy {}", m.accuracy(&data.test)?);
        }
        Command::TrainBpfc { common, input, out } => {
            let cfg = load(&common)?;
            let data = pipeline::load_data(&cfg.dataset)?;
            let mut m = load_float(&input)?;
            train_bpfc(&mut m, &data.train, &cfg.bpfc())?;
            save_container(&out, &Checkpoint::Float(m.clone()))?;
            println!("test accuracy {}", m.accuracy(&data.test)?);
        }
        Command::AnalyzeCritical { common, input, out } => {
            let cfg = load(&common)?;
            let data = pipeline::load_data(&cfg.dataset)?;
            let m = load_float(&input)?;
            let rep = pipeline::analyze_critical(&cfg, &m, &data.train)?;
            report::write_criticality(&out, &rep)?;
            println!("critical layers: {}", rep.critical.join(","));
        }
        Command::TrainFault {
            common,
            input,
            critical,
            out,
        } => {
            let cfg = load(&common)?;
            let data = pipeline::load_data(&cfg.dataset)?;
            let rep = report::read_criticality(&critical, cfg.criticality())?;
            let mut m = load_float(&input)?;
            train_fault_aware(
                &mut m,
                &data.train,
                &rep.critical,
                &cfg.fault_train(),
                &cfg.stage2_fault(),
            )?;
            save_container(&out, &Checkpoint::Float(m.clone()))?;
            println!("test accuracy {}", m.accuracy(&data.test)?);
        }
        Command::Quantize {
            common,
            input,
            out,
            bits,
            n_msb,
            log,
        } => {
            let cfg = load(&common)?;
            let data = pipeline::load_data(&cfg.dataset)?;
            let m = load_float(&input)?;
            let q = match bits {
                Some(b) => QuantizedModel::quantize(&m, b)?.protect_msbs(n_msb)?,
                None => {
                    let s = pipeline::quantize_search(&cfg, &m, &data.test)?;
                    if let Some(log) = log {
                        report::write_search_log(&log, &s.log)?;
                    }
                    s.model
                }
            };
            let acc = q.dequantize()?.accuracy(&data.test)?;
            println!(
                "b={} n_msb={} storage={} bytes test accuracy {acc}",
                q.bits().unwrap_or(0),
                q.n_msb().unwrap_or(0),
                q.storage_bytes()
            );
            save_container(&out, &Checkpoint::Quantized(q))?;
        }
        Command::AttackEval {
            common,
            models,
            out,
        } => {
            let cfg = load(&common)?;
            let data = pipeline::load_data(&cfg.dataset)?;
            let mut rows = Vec::new();
            for path in &models {
                let m = load_container(path)?.to_model()?;
                let mut accuracies = Vec::new();
                for a in cfg.attacks() {
                    accuracies.push((
                        a.kind,
                        parallel::attack_accuracy(&m, &data.test, &a, cfg.eval.batch_size)?,
                    ));
                }
                rows.push(report::AttackRow {
                    model: stem(path),
                    epsilon: cfg.eval.epsilon,
                    clean: m.accuracy(&data.test)?,
                    accuracies,
                });
            }
            report::write_attacks(&out, &rows)?;
        }
        Command::FaultEval {
            common,
            models,
            out,
        } => {
            let cfg = load(&common)?;
            let data = pipeline::load_data(&cfg.dataset)?;
            let e = &cfg.eval;
            let mut rows = Vec::new();
            for path in &models {
                let sweep = match load_container(path)? {
                    Checkpoint::Float(m) => parallel::evaluate_reliability(
                        &m,
                        &data.test,
                        &e.bers,
                        e.trials,
                        e.fault_seed,
                    )?,
                    Checkpoint::Quantized(q) => parallel::evaluate_reliability(
                        &q,
                        &data.test,
                        &e.bers,
                        e.trials,
                        e.fault_seed,
                    )?,
                };
                rows.extend(sweep.into_iter().map(|r| (stem(path), r)));
            }
            report::write_ber(&out, &rows)?;
        }
        Command::RunAll {
            common,
            out,
            resume_from,
        } => {
            let cfg = load(&common)?;
            let s = pipeline::resume(&cfg, &out, resume_from.unwrap_or(Stage::Clean))?;
            let [b, p, f, q] = s.stage_accuracy;
            println!("stage accuracy: Baseline {b} BPFC {p} FA {f} Q-FA {q}");
            println!(
                "final: b={} n_msb={} -> {}",
                s.search.bits,
                s.search.n_msb,
                s.final_container().display()
            );
        }
        Command::Report { dir } => print!("{}", pipeline::render_report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            if let Error::Stage {
                checkpoint: Some(path),
                ..
            } = &e
            {
                eprintln!("last good checkpoint: {}", path.display());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
