//! MAC aggregation, cached-vs-baseline drift, and CSV/JSON reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coarse::BlockRole;
use crate::error::{Error, Result};
use crate::pipeline::{Branch, LatentState, Ledger};
use crate::tensor::cosine_flat;

const DRIFT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: usize,
    pub role: BlockRole,
    pub branch: Branch,
    pub macs: u64,
}

/// MAC counts keyed by `(step, role, branch)` with phase and module totals.
/// The former phase is steps `< ⌊T/2⌋`; the latter is the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacLedger {
    pub entries: Vec<LedgerEntry>,
    pub former: u64,
    pub latter: u64,
    pub control: u64,
    pub generative: u64,
    pub total: u64,
}

impl MacLedger {
    pub fn from_counter(counter: &Ledger, t_generative: usize) -> Self {
        let half = t_generative / 2;
        let mut ledger = MacLedger {
            entries: Vec::with_capacity(counter.entries().len()),
            former: 0,
            latter: 0,
            control: 0,
            generative: 0,
            total: 0,
        };
        for (tag, &macs) in counter.entries() {
            ledger.entries.push(LedgerEntry {
                step: tag.step,
                role: tag.role,
                branch: tag.branch,
                macs,
            });
            if tag.step < half {
                ledger.former += macs;
            } else {
                ledger.latter += macs;
            }
            if tag.role.is_control() {
                ledger.control += macs;
            } else {
                ledger.generative += macs;
            }
            ledger.total += macs;
        }
        debug_assert_eq!(ledger.total, counter.total());
        ledger
    }

    /// Sum of entries for `step` restricted to `roles`.
    pub fn step_total(&self, step: usize, roles: &[BlockRole]) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.step == step && roles.contains(&e.role))
            .map(|e| e.macs)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub step: usize,
    pub l2_rel: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub per_step: Vec<DriftPoint>,
    pub final_l2_rel: f64,
    pub final_cosine: f64,
}

/// Per-step `‖a − b‖ / max(‖a‖, ε)` and cosine between two trajectories;
/// `a` is the reference.
pub fn drift(traj_a: &[LatentState], traj_b: &[LatentState]) -> Result<DriftReport> {
    if traj_a.len() != traj_b.len() || traj_a.is_empty() {
        return Err(Error::Degenerate(format!(
            "trajectory lengths differ or are empty: {} vs {}",
            traj_a.len(),
            traj_b.len()
        )));
    }
    let per_step = traj_a
        .iter()
        .zip(traj_b)
        .map(|(a, b)| {
            let diff = a.x.sub(&b.x)?;
            Ok(DriftPoint {
                step: a.step,
                l2_rel: diff.norm() / a.x.norm().max(DRIFT_EPS),
                cosine: cosine_flat(&a.x, &b.x)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let last = *per_step.last().expect("non-empty");
    Ok(DriftReport {
        per_step,
        final_l2_rel: last.l2_rel,
        final_cosine: last.cosine,
    })
}

/// `base.total / cached.total`.
pub fn speedup(base: &MacLedger, cached: &MacLedger) -> Result<f64> {
    if base.total == 0 || cached.total == 0 {
        return Err(Error::Degenerate(
            "speedup needs non-zero MAC totals".into(),
        ));
    }
    Ok(base.total as f64 / cached.total as f64)
}

/// Everything one run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub plan_digest: String,
    pub tau_c: Option<usize>,
    pub ledger: MacLedger,
    pub drift: DriftReport,
    pub baseline_macs: u64,
    pub speedup_macs: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Degenerate(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::validation("report", e.to_string()))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

pub(crate) fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        let row: Vec<String> = row.into_iter().collect();
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `ledger.csv` and `drift.csv` into `dir`.
pub fn emit_csv(report: &RunReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(
        &dir.join("ledger.csv"),
        &["step", "role", "branch", "macs"],
        report.ledger.entries.iter().map(|e| {
            [
                e.step.to_string(),
                e.role.to_string(),
                e.branch.to_string(),
                e.macs.to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("drift.csv"),
        &["step", "l2_rel", "cosine"],
        report.drift.per_step.iter().map(|d| {
            [
                d.step.to_string(),
                d.l2_rel.to_string(),
                d.cosine.to_string(),
            ]
        }),
    )
}

/// One row of an ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: f64,
    pub macs_total: u64,
    pub final_l2_rel: f64,
    pub final_cosine: f64,
    pub speedup: f64,
}

pub fn emit_plot_data(points: &[SweepPoint], path: &Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::validation("values", "sweep has no points"));
    }
    write_csv(
        path,
        &[
            "param",
            "value",
            "macs_total",
            "final_l2_rel",
            "final_cosine",
            "speedup",
        ],
        points.iter().map(|p| {
            [
                p.param.clone(),
                p.value.to_string(),
                p.macs_total.to_string(),
                p.final_l2_rel.to_string(),
                p.final_cosine.to_string(),
                p.speedup.to_string(),
            ]
        }),
    )
}
