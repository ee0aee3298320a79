//! Deterministic file emission for the subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::experiments::{self, all_pass, Check, ConvergenceTable};
use crate::{CliError, VERSION};

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: BTreeMap<String, String>,
    #[serde(flatten)]
    body: &'a T,
}

fn write_json<T: Serialize>(path: &Path, command: &'static str, cfg: &ExperimentConfig, body: &T) -> Result<(), CliError> {
    let envelope = Envelope { tool: "rheat", version: VERSION, command, config: cfg.echo(), body };
    let mut text = serde_json::to_string_pretty(&envelope).map_err(|e| CliError::Failed(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct CheckList<'a> {
    pass: bool,
    checks: &'a [Check],
}

/// `audit.json`.
pub fn write_audit(cfg: &ExperimentConfig, out: &Path) -> Result<bool, CliError> {
    let checks = experiments::audit(cfg)?;
    let pass = all_pass(&checks);
    write_json(&out.join("audit.json"), "audit", cfg, &CheckList { pass, checks: &checks })?;
    Ok(pass)
}

/// `oracle.json`.
pub fn write_oracle(cfg: &ExperimentConfig, out: &Path) -> Result<bool, CliError> {
    let checks = experiments::oracle(cfg)?;
    let pass = all_pass(&checks);
    write_json(&out.join("oracle.json"), "oracle", cfg, &CheckList { pass, checks: &checks })?;
    Ok(pass)
}

fn number(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:e}")
    }
}

/// The CSV text of a convergence table.
///
/// Lines starting with `#` carry the version, the configuration, blow-up
/// flags and the overall least-squares order.
pub fn convergence_csv(cfg: &ExperimentConfig, table: &ConvergenceTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# rheat {VERSION} convergence");
    for (k, v) in cfg.echo() {
        let _ = writeln!(s, "# {k} = {v}");
    }
    let _ = writeln!(s, "# reference = {}, seeds = {:?}", table.reference, table.seeds);
    let _ = writeln!(s, "mesh_exponent,h,sup_error,l2_error,fitted_order");
    for r in &table.rows {
        let order = r.fitted_order.map_or_else(String::new, number);
        let _ = writeln!(s, "{},{},{},{},{}", r.mesh_exponent, number(r.h), number(r.sup_error), number(r.l2_error), order);
        if let Some(msg) = &r.blowup {
            let _ = writeln!(s, "# blowup mesh_exponent = {}: {msg}", r.mesh_exponent);
        }
    }
    let _ = writeln!(s, "# fitted_order = {}", number(table.fitted_order));
    s
}

/// `convergence.csv`; fails the run if `convergence.min_order` is set and missed.
pub fn write_convergence(cfg: &ExperimentConfig, out: &Path) -> Result<bool, CliError> {
    let table = experiments::convergence(cfg)?;
    std::fs::write(out.join("convergence.csv"), convergence_csv(cfg, &table))?;
    Ok(cfg.min_order.map_or(true, |min| table.fitted_order >= min))
}

#[derive(Serialize)]
struct Snapshot {
    index: usize,
    time: f64,
    file: String,
}

#[derive(Serialize)]
struct SolveBody<'a> {
    report: &'a rough_heat::dynamics::SolveReport,
    snapshots: Vec<Snapshot>,
}

/// `solve.json` plus `snapshot_NNNNN.bin` in the field binary format.
pub fn write_solve(cfg: &ExperimentConfig, out: &Path) -> Result<bool, CliError> {
    let report = experiments::solve_run(cfg)?;
    let times = report.path.times();
    let last = report.path.y.len() - 1;
    let mut snapshots = Vec::new();
    for (m, y) in report.path.y.iter().enumerate() {
        let keep = m == last || (cfg.snapshot_stride > 0 && m % cfg.snapshot_stride == 0);
        if !keep {
            continue;
        }
        let file = format!("snapshot_{m:05}.bin");
        let mut w = BufWriter::new(File::create(out.join(&file))?);
        y.write_binary(&mut w)?;
        w.flush()?;
        snapshots.push(Snapshot { index: m, time: times[m], file });
    }
    write_json(&out.join("solve.json"), "solve", cfg, &SolveBody { report: &report, snapshots })?;
    Ok(true)
}

#[derive(Serialize)]
struct SampleBody {
    file: &'static str,
    bytes: usize,
    sha256: String,
    cells: usize,
    dim: usize,
    level: usize,
}

/// `signal.bin` and its description `sample.json`.
pub fn write_sample(cfg: &ExperimentConfig, out: &Path) -> Result<bool, CliError> {
    let signal = cfg.signal()?;
    let bytes = signal.to_bytes();
    std::fs::write(out.join("signal.bin"), &bytes)?;
    let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let body = SampleBody {
        file: "signal.bin",
        bytes: bytes.len(),
        sha256,
        cells: signal.cells(),
        dim: signal.dim(),
        level: signal.level(),
    };
    write_json(&out.join("sample.json"), "sample", cfg, &body)?;
    Ok(true)
}
