//! Result files. Everything written here is a deterministic function of the
//! scenario and seed; timing goes to the log only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;

use super::config::Scenario;
use super::metrics::{robot_metrics, RobotMetrics};
use super::run::MonteCarlo;
use crate::error::{Error, Result};
use crate::network::{payload_scalars, CommCost};

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_metrics(path: &Path, m: &RobotMetrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["tick", "rmse", "two_sigma", "nees", "nees_lo", "nees_hi"])
        .map_err(csv_err)?;
    for k in 0..m.rmse.len() {
        w.write_record([
            (k + 1).to_string(),
            m.rmse[k].to_string(),
            m.two_sigma[k].to_string(),
            m.nees[k].to_string(),
            m.nees_lo.to_string(),
            m.nees_hi.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_comm(path: &Path, c: &CommCost) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["scope", "messages", "scalars", "bytes", "homogeneous_scalars", "reduction"])
        .map_err(csv_err)?;
    let homog = c.homogeneous_message_scalars;
    let reduction = |het: usize, hom: usize| if hom == 0 { 0.0 } else { 1.0 - het as f64 / hom as f64 };
    for (robot, rc) in &c.per_robot {
        let hom = homog * rc.messages;
        w.write_record([
            format!("robot_{robot}"),
            rc.messages.to_string(),
            rc.scalars.to_string(),
            rc.bytes.to_string(),
            hom.to_string(),
            reduction(rc.scalars, hom).to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes: usize = c.per_robot.values().map(|r| r.bytes).sum();
    w.write_record([
        "total".to_string(),
        c.messages.to_string(),
        c.heterogeneous_scalars.to_string(),
        bytes.to_string(),
        c.homogeneous_scalars.to_string(),
        c.reduction().to_string(),
    ])
    .map_err(csv_err)?;
    w.write_record([
        "largest_message".to_string(),
        "1".to_string(),
        c.max_message_scalars.to_string(),
        String::new(),
        homog.to_string(),
        c.max_message_reduction().to_string(),
    ])
    .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

fn summary(metrics: &[RobotMetrics]) -> serde_json::Value {
    let per: BTreeMap<String, serde_json::Value> = metrics
        .iter()
        .map(|m| {
            (
                m.robot.to_string(),
                json!({
                    "dim": m.dim,
                    "runs": m.runs,
                    "mean_rmse": m.mean_rmse(),
                    "mean_two_sigma": m.mean_two_sigma(),
                    "mean_nees": m.mean_nees(),
                    "nees_bounds": [m.nees_lo, m.nees_hi],
                    "nees_in_bounds_fraction": m.nees_in_bounds_fraction(),
                    "rmse_within_two_sigma_fraction": m.rmse_within_two_sigma_fraction(),
                }),
            )
        })
        .collect();
    json!(per)
}

/// Write the result set for a Monte Carlo campaign into `dir`.
pub fn write_results(dir: &Path, scn: &Scenario, mc: &MonteCarlo) -> Result<()> {
    fs::create_dir_all(dir)?;
    let metrics = robot_metrics(&mc.runs)?;
    for m in &metrics {
        write_metrics(&dir.join(format!("metrics_{}.csv", m.robot)), m)?;
    }
    let mut manifest = json!({
        "tool": "fgddf",
        "version": env!("CARGO_PKG_VERSION"),
        "scenario": scn.config,
        "root_seed": scn.config.seed,
        "mc_runs": scn.config.mc_runs,
        "completed_runs": mc.runs.iter().map(|r| r.run).collect::<Vec<_>>(),
        "failed_runs": mc.failures.iter().map(|f| json!({"run": f.run, "error": f.error})).collect::<Vec<_>>(),
        "global_dim": scn.global_dim(),
        "homogeneous_message_scalars": payload_scalars(scn.global_dim()),
        "delivery_log_run": mc.runs.first().map(|r| r.run),
        "centralized": !mc.centralized.is_empty(),
        "summary": summary(&metrics),
    });
    if let Some(first) = mc.runs.first() {
        let mut w = csv::Writer::from_path(dir.join("delivery_log.csv")).map_err(csv_err)?;
        for rec in &first.delivery_log {
            w.serialize(rec).map_err(csv_err)?;
        }
        if first.delivery_log.is_empty() {
            w.write_record(["tick", "edge_i", "edge_j", "direction", "delivered", "scalars", "bytes"])
                .map_err(csv_err)?;
        }
        w.flush()?;
        write_comm(&dir.join("comm_cost.csv"), &first.comm)?;
        let fallbacks = mc
            .runs
            .iter()
            .flat_map(|r| &r.reports)
            .filter(|r| r.report.fell_back_to_ci)
            .count();
        manifest["ci_fallbacks"] = json!(fallbacks);
    }
    if !mc.centralized.is_empty() {
        let cdir = dir.join("centralized");
        fs::create_dir_all(&cdir)?;
        let cm = robot_metrics(&mc.centralized)?;
        for m in &cm {
            write_metrics(&cdir.join(format!("metrics_{}.csv", m.robot)), m)?;
        }
        manifest["centralized_summary"] = summary(&cm);
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(())
}

/// Write each robot's final factor graph of the first run as Graphviz DOT.
pub fn write_dot(dir: &Path, mc: &MonteCarlo) -> Result<()> {
    fs::create_dir_all(dir)?;
    if let Some(first) = mc.runs.first() {
        for (robot, g) in &first.final_graphs {
            fs::write(dir.join(format!("graph_{robot}.dot")), g.to_dot(&format!("robot{robot}")))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Means {
    rmse: f64,
    two_sigma: f64,
    nees: f64,
    in_bounds: f64,
}

fn read_metrics(dir: &Path) -> Result<BTreeMap<String, Means>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir)?;
    let mut names: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("metrics_") && n.ends_with(".csv"))
        .collect();
    names.sort();
    for name in names {
        let robot = name["metrics_".len()..name.len() - 4].to_string();
        let mut rd = csv::Reader::from_path(dir.join(&name)).map_err(csv_err)?;
        let mut acc = Means::default();
        let mut n = 0usize;
        let mut inside = 0usize;
        for row in rd.records() {
            let row = row.map_err(csv_err)?;
            let f = |i: usize| -> Result<f64> {
                row.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Io(std::io::Error::other(format!("{name}: bad value in column {i}"))))
            };
            acc.rmse += f(1)?;
            acc.two_sigma += f(2)?;
            let nees = f(3)?;
            acc.nees += nees;
            if nees >= f(4)? && nees <= f(5)? {
                inside += 1;
            }
            n += 1;
        }
        let d = n.max(1) as f64;
        out.insert(
            robot,
            Means {
                rmse: acc.rmse / d,
                two_sigma: acc.two_sigma / d,
                nees: acc.nees / d,
                in_bounds: inside as f64 / d,
            },
        );
    }
    if out.is_empty() {
        return Err(Error::Io(std::io::Error::other(format!(
            "{}: no metrics_<robot>.csv files",
            dir.display()
        ))));
    }
    Ok(out)
}

/// Table of run-averaged metric differences (b - a) per robot present in both.
pub fn compare(a: &Path, b: &Path) -> Result<String> {
    let ma = read_metrics(a)?;
    let mb = read_metrics(b)?;
    let mut out = String::new();
    writeln!(out, "{:<6} {:<16} {:>12} {:>12} {:>12}", "robot", "metric", "a", "b", "b-a").unwrap();
    for (robot, x) in &ma {
        let Some(y) = mb.get(robot) else { continue };
        for (name, va, vb) in [
            ("mean_rmse", x.rmse, y.rmse),
            ("mean_two_sigma", x.two_sigma, y.two_sigma),
            ("mean_nees", x.nees, y.nees),
            ("nees_in_bounds", x.in_bounds, y.in_bounds),
        ] {
            writeln!(out, "{:<6} {:<16} {:>12.5} {:>12.5} {:>12.5}", robot, name, va, vb, vb - va).unwrap();
        }
    }
    Ok(out)
}
