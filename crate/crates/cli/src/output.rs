//! File writers shared by the subcommands.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ecbf_core::sim::RunResult;
use serde_json::json;

use crate::CliError;

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

/// `t, q.., dq.., taunom.., tauqp.., ee_x.., eed_x.., h`; `h` is `inf` without an obstacle.
pub fn trajectory_csv(result: &RunResult<f64>, n: usize, filtered: bool) -> String {
    let mut out = String::from("t");
    for prefix in ["q", "dq", "taunom", "tauqp"] {
        for i in 1..=n {
            let _ = write!(out, ",{prefix}{i}");
        }
    }
    out.push_str(",ee_x,ee_y,ee_z,eed_x,eed_y,eed_z,h\n");
    for row in &result.log {
        let _ = write!(out, "{}", row.t);
        for v in row
            .q
            .iter()
            .chain(row.dq.iter())
            .chain(row.tau_nom.iter())
            .chain(row.tau_qp.iter())
            .chain(row.ee.iter())
            .chain(row.ee_des.iter())
        {
            let _ = write!(out, ",{v}");
        }
        if filtered {
            let _ = writeln!(out, ",{}", row.h);
        } else {
            out.push_str(",inf\n");
        }
    }
    out
}

pub fn summary_json(r_o: Option<f64>, kappa: (f64, f64), result: &RunResult<f64>) -> String {
    let value = json!({
        "r_o": r_o,
        "kappa1": kappa.0,
        "kappa2": kappa.1,
        "min_h": r_o.map(|_| result.min_h),
        "run_ctrl": result.run_ctrl,
        "run_tsep": result.run_tsep,
        "final_err": result.final_err,
        "final_joint_err": result.final_joint_err,
        "max_constraint_violation": result.max_constraint_violation,
        "filter_active_steps": result.filter_active_steps,
        "good_run": result.good_run,
        "fault": result.fault.map(|f| f.tag()),
        "steps": result.log.len(),
    });
    let mut text = serde_json::to_string_pretty(&value).expect("summary serializes");
    text.push('\n');
    text
}

/// Run metadata sidecar; the only output that carries a timestamp.
pub fn write_meta(dir: &Path, command: &str, args: serde_json::Value) -> Result<(), CliError> {
    let unix_time = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let value = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "unix_time": unix_time,
        "args": args,
    });
    write(
        dir,
        "meta.json",
        &(serde_json::to_string_pretty(&value).expect("meta serializes") + "\n"),
    )
}
