//! CSV and JSON emission.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a rerun
//! with the same inputs reproduces every CSV byte for byte. Agent ids are
//! 1-based as in scenario files; sweeps `k` are 0-based and rounds `s` 1-based.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use distopt_core::dva::{Deviations, RoundRecord};
use distopt_core::dynamics::{GridField, TimeGrid};
use distopt_core::netsim::AccessLog;
use serde::Serialize;

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> io::Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        path,
    )?)))
}

pub fn write_rounds(path: &Path, records: &[RoundRecord]) -> io::Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "k",
        "s",
        "agent",
        "x_norm",
        "f_norm",
        "l_norm",
        "v_norm",
        "consensus_dev",
        "ref_dev",
    ])?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            r.s.to_string(),
            (r.agent + 1).to_string(),
            r.x_norm.to_string(),
            r.f_norm.to_string(),
            r.l_norm.to_string(),
            r.v_norm.to_string(),
            r.consensus_dev.to_string(),
            opt(r.ref_dev),
        ])?;
    }
    w.flush()
}

/// `‖U(t_n)‖` and, when a reference is given, `‖U(t_n) − u_ref(t_n)‖`.
pub fn write_controller(
    path: &Path,
    grid: &TimeGrid,
    controls: &GridField,
    reference: Option<&GridField>,
) -> io::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["t", "u_norm", "u_ref_dev"])?;
    for n in 0..grid.len() {
        let u = controls.at(n);
        let dev = reference.map(|r| (&u - r.at(n)).norm());
        w.write_record([grid.time(n).to_string(), u.norm().to_string(), opt(dev)])?;
    }
    w.flush()
}

/// Stacked state trajectories, one row per `(run, t_n)`.
pub fn write_trajectories(
    path: &Path,
    grid: &TimeGrid,
    runs: &[(&str, &GridField)],
) -> io::Result<()> {
    let dim = runs.first().map_or(0, |(_, g)| g.dim());
    let mut w = writer(path)?;
    let mut header = vec!["run".to_string(), "t".to_string()];
    header.extend((1..=dim).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for (name, field) in runs {
        for n in 0..grid.len() {
            let mut row = vec![name.to_string(), grid.time(n).to_string()];
            row.extend(field.node(n).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()
}

pub fn write_access_log(path: &Path, log: &AccessLog) -> io::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["round", "reader", "owner"])?;
    for a in log.records() {
        w.write_record([
            a.round.to_string(),
            (a.reader + 1).to_string(),
            (a.owner + 1).to_string(),
        ])?;
    }
    w.flush()
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct DeviationSummary {
    pub x: f64,
    pub f: f64,
    pub l: f64,
    pub v: f64,
    pub u: f64,
}

impl From<Deviations> for DeviationSummary {
    fn from(d: Deviations) -> Self {
        DeviationSummary {
            x: d.x,
            f: d.f,
            l: d.l,
            v: d.v,
            u: d.u,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CentralizedSummary {
    pub cost: f64,
    pub sweeps_run: usize,
    pub sup_changes: Vec<f64>,
    pub hjb_residuals: Vec<f64>,
    pub max_condition: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributedSummary {
    pub cost: f64,
    pub rho: f64,
    pub final_consensus_dev: f64,
    pub deviations: Option<DeviationSummary>,
    pub access_records: usize,
    pub access_violations: usize,
    pub bytes_posted: usize,
}

/// Published figures for the full-scale five-robot scenario, kept for context only.
#[derive(Debug, Clone, Serialize)]
pub struct LiteratureContext {
    pub distributed_cost: f64,
    pub consensus_baseline_cost: f64,
    pub note: &'static str,
}

impl Default for LiteratureContext {
    fn default() -> Self {
        LiteratureContext {
            distributed_cost: 110.25,
            consensus_baseline_cost: 174.04,
            note: "reported at full scale; not a target for reduced-budget runs",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub scenario: String,
    pub config_digest: String,
    pub seed: u64,
    pub agents: usize,
    pub state_dim: usize,
    pub centers: usize,
    pub shape: f64,
    pub horizon: f64,
    pub time_steps: usize,
    pub sweeps: usize,
    pub rounds: usize,
    pub schedule: String,
    pub kappa: f64,
    pub rho: Option<f64>,
    pub centralized: Option<CentralizedSummary>,
    pub distributed: Option<DistributedSummary>,
    /// `|J_d − J_c| / |J_c|` when both runs finished.
    pub relative_cost_gap: Option<f64>,
    pub literature: LiteratureContext,
    pub wall_time_s: f64,
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, summary)?;
    writeln!(w)?;
    w.flush()
}
