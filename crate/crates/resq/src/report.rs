//! CSV tables and the run report. Floats are written in shortest
//! round-trip form so the tables are exact and byte-stable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use resq_core::attack::AttackKind;
use resq_core::criticality::{CriticalityConfig, CriticalityReport};
use resq_core::fault::ReliabilityRow;
use resq_core::search::Probe;

use crate::error::{Error, Result};
use crate::pipeline::RunSummary;

pub const STAGE_NAMES: [&str; 4] = ["Baseline", "BPFC", "FA", "Q-FA"];

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRow {
    pub model: String,
    pub epsilon: f64,
    pub clean: f64,
    pub accuracies: Vec<(AttackKind, f64)>,
}

impl AttackRow {
    pub fn accuracy(&self, kind: AttackKind) -> Option<f64> {
        self.accuracies
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|&(_, a)| a)
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_stage_accuracy(path: &Path, acc: &[f64; 4]) -> Result<()> {
    write_rows(
        path,
        &STAGE_NAMES,
        [acc.iter().map(f64::to_string).collect::<Vec<_>>()],
    )
}

pub fn read_stage_accuracy(path: &Path) -> Result<[f64; 4]> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(STAGE_NAMES) {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    let rows: Vec<[f64; 4]> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))?;
    match rows.as_slice() {
        [row] => Ok(*row),
        _ => Err(Error::format(
            path,
            format!("expected one row, found {}", rows.len()),
        )),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CriticalityRecord {
    layer: String,
    score: f64,
    normalized: f64,
    critical: bool,
}

pub fn write_criticality(path: &Path, rep: &CriticalityReport) -> Result<()> {
    let mut w = writer(path)?;
    for ((name, score), (_, norm)) in rep.scores.iter().zip(&rep.normalized) {
        w.serialize(CriticalityRecord {
            layer: name.clone(),
            score: *score,
            normalized: *norm,
            critical: rep.is_critical(name),
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_criticality(path: &Path, config: CriticalityConfig) -> Result<CriticalityReport> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let recs: Vec<CriticalityRecord> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok(CriticalityReport {
        scores: recs.iter().map(|r| (r.layer.clone(), r.score)).collect(),
        normalized: recs
            .iter()
            .map(|r| (r.layer.clone(), r.normalized))
            .collect(),
        critical: recs
            .iter()
            .filter(|r| r.critical)
            .map(|r| r.layer.clone())
            .collect(),
        config,
    })
}

pub fn write_search_log(path: &Path, log: &[Probe]) -> Result<()> {
    write_rows(
        path,
        &[
            "probe",
            "lo",
            "hi",
            "bits",
            "accuracy",
            "n_msb",
            "reliability",
            "decision",
        ],
        log.iter().enumerate().map(|(i, p)| {
            vec![
                i.to_string(),
                p.lo.to_string(),
                p.hi.to_string(),
                p.bits.to_string(),
                p.accuracy.to_string(),
                p.n_msb.to_string(),
                p.reliability.map_or_else(String::new, |r| r.to_string()),
                p.decision.name().to_string(),
            ]
        }),
    )
}

pub fn write_attacks(path: &Path, rows: &[AttackRow]) -> Result<()> {
    let kinds: Vec<AttackKind> = rows
        .first()
        .map(|r| r.accuracies.iter().map(|(k, _)| *k).collect())
        .unwrap_or_default();
    let mut header = vec!["model", "epsilon", "clean"];
    header.extend(kinds.iter().map(|k| k.name()));
    write_rows(
        path,
        &header,
        rows.iter().map(|r| {
            let mut rec = vec![r.model.clone(), r.epsilon.to_string(), r.clean.to_string()];
            rec.extend(r.accuracies.iter().map(|(_, a)| a.to_string()));
            rec
        }),
    )
}

pub fn read_attacks(path: &Path) -> Result<Vec<AttackRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let kinds = header
        .iter()
        .skip(3)
        .map(|h| {
            AttackKind::parse(h)
                .ok_or_else(|| Error::format(path, format!("unknown attack column {h}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::format(path, format!("{s}: {e}")))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push(AttackRow {
            model: rec[0].to_string(),
            epsilon: num(&rec[1])?,
            clean: num(&rec[2])?,
            accuracies: kinds
                .iter()
                .zip(rec.iter().skip(3))
                .map(|(k, v)| Ok((*k, num(v)?)))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerRecord {
    pub model: String,
    pub ber: f64,
    pub mean_acc: f64,
    pub std: f64,
    pub trials: usize,
}

pub fn write_ber(path: &Path, rows: &[(String, ReliabilityRow)]) -> Result<()> {
    let mut w = writer(path)?;
    for (model, r) in rows {
        w.serialize(BerRecord {
            model: model.clone(),
            ber: r.ber,
            mean_acc: r.mean_accuracy,
            std: r.std,
            trials: r.trials,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ber(path: &Path) -> Result<Vec<BerRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))
}

#[derive(Serialize)]
struct RunReport<'a> {
    final_bits: u32,
    final_n_msb: u32,
    final_accuracy: f64,
    final_reliability: f64,
    critical: &'a [String],
    #[serde(rename = "stage")]
    stages: &'a [crate::pipeline::StageReport],
}

/// Writes the run report. Unlike the CSVs it records wall time and so is
/// not reproducible byte for byte.
pub fn write_run_report(path: &Path, s: &RunSummary) -> Result<()> {
    let rep = RunReport {
        final_bits: s.search.bits,
        final_n_msb: s.search.n_msb,
        final_accuracy: s.search.accuracy,
        final_reliability: s.search.reliability,
        critical: &s.critical,
        stages: &s.reports,
    };
    let text = toml::to_string(&rep).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
