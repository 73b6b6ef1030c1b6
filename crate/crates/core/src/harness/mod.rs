// SPDX-License-Identifier: Apache-2.0

//! Scenario files, module drivers, metrics output and the bounded data feed.

mod config;
mod drivers;
mod feed;
mod metrics;

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

pub use config::{
    demo_catalog, demo_schema, GateInputs, GateSection, OptdSection, Prepared, RecoverSection, RunOptions,
    ScenarioConfig, ScenarioHeader, ScenarioKind, SelectSection,
};
pub use drivers::{run_cc_sim, run_gate, run_optd, run_recover_demo, run_select, DataBatch, DriverOutput};
pub use feed::{channel, CircularBuffer, Closed, Consumer, Producer};
pub use metrics::{Metrics, MetricsRow, CSV_HEADER};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl HarnessError {
    pub fn io(e: impl std::fmt::Display) -> HarnessError {
        HarnessError::Io(e.to_string())
    }

    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Runtime(_) | HarnessError::Io(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Runtime(_) => "runtime",
            HarnessError::Io(_) => "io",
        }
    }
}

/// Files written by a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub kind: ScenarioKind,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: Value,
}

/// Load and validate a scenario file without running anything.
pub fn prepare(config_path: &Path, opts: &RunOptions) -> Result<Prepared, HarnessError> {
    let config = ScenarioConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    config.prepare(base, opts)
}

/// Run one module driver.
pub fn run_module(p: &Prepared, kind: ScenarioKind) -> Result<DriverOutput, HarnessError> {
    let c = &p.config;
    match kind {
        ScenarioKind::Select => run_select(&c.select, p.seed),
        ScenarioKind::CcSim => run_cc_sim(&c.cc_sim, p.seed),
        ScenarioKind::RecoverDemo => run_recover_demo(&c.recover, p.seed, &p.out),
        ScenarioKind::Optd => run_optd(&c.optd, &p.catalog, p.seed),
        ScenarioKind::Gate => run_gate(&c.gate, &p.gate.schema, p.gate.net.as_ref(), &p.gate.predicates, p.seed),
        ScenarioKind::Full => Err(HarnessError::Runtime("full is not a module".into())),
    }
}

/// Run the prepared scenario. `full` runs every module driver in a fixed
/// order and concatenates their rows; the summary is keyed by module.
pub fn execute(p: &Prepared) -> Result<DriverOutput, HarnessError> {
    if p.kind != ScenarioKind::Full {
        return run_module(p, p.kind);
    }
    let mut metrics = Metrics::default();
    let mut summary = Map::new();
    for kind in ScenarioKind::MODULES {
        let out = run_module(p, kind)?;
        metrics.extend(out.metrics);
        summary.insert(kind.name().into(), out.summary);
    }
    Ok(DriverOutput { metrics, summary: Value::Object(summary) })
}

/// Validate, run, and write `metrics.csv` and `summary.json` under the
/// output directory.
pub fn run_scenario(config_path: &Path, opts: &RunOptions) -> Result<RunReport, HarnessError> {
    let prepared = prepare(config_path, opts)?;
    run_prepared(&prepared)
}

pub fn run_prepared(p: &Prepared) -> Result<RunReport, HarnessError> {
    std::fs::create_dir_all(&p.out).map_err(HarnessError::io)?;
    let out = execute(p)?;
    let metrics_path = p.out.join(METRICS_FILE);
    let summary_path = p.out.join(SUMMARY_FILE);
    out.metrics.write_csv(&metrics_path)?;
    let summary = serde_json::json!({
        "scenario": p.kind.name(),
        "seed": p.seed,
        "result": out.summary,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(HarnessError::io)?;
    std::fs::write(&summary_path, text + "\n").map_err(HarnessError::io)?;
    Ok(RunReport { kind: p.kind, metrics_path, summary_path, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("scenario.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn empty_cc_sim_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "[scenario]\nkind = \"cc-sim\"\n[cc_sim]\nwindows = 0\nshift_at = 0\n");
        let report = run_scenario(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(std::fs::read_to_string(report.metrics_path).unwrap(), "t,scenario,metric,value\n");
    }

    #[test]
    fn invalid_config_has_no_side_effects() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "[scenario]\nkind = \"select\"\n[select]\nphi = 2.0\n");
        let err = run_scenario(&cfg, &RunOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn missing_config_is_config_error() {
        let err = run_scenario(Path::new("/definitely/not/here.toml"), &RunOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn select_reports_feed_and_regret() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "[scenario]\nkind = \"select\"\nseed = 5\n[select]\nbudget = 300\n");
        let report = run_scenario(&cfg, &RunOptions::default()).unwrap();
        let r = &report.summary["result"];
        assert!(r["cost"]["elapsed"].as_f64().unwrap() <= 300.0);
        assert_eq!(r["feed"]["batches_consumed"], r["total_epochs"]);
        assert!(r["oracle"]["regret"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn recover_demo_restores_state() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "[scenario]\nkind = \"recover-demo\"\nseed = 2\n");
        let report = run_scenario(&cfg, &RunOptions::default()).unwrap();
        let r = &report.summary["result"];
        assert_eq!(r["log_verified"], true);
        assert_eq!(r["state_restored"], true);
        assert_eq!(r["false_positives"], 0);
        assert_eq!(r["detected_keys"].as_array().unwrap().len(), 4);
        assert_eq!(r["bit_flips"]["detected"], r["bit_flips"]["injected"]);
        assert!(r["max_replayed"].as_u64().unwrap() < 4);
        assert!(dir.path().join("out/recovery.log").exists());
    }

    #[test]
    fn gate_weights_form_a_sparse_simplex() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "[scenario]\nkind = \"gate\"\nseed = 1\n");
        let report = run_scenario(&cfg, &RunOptions::default()).unwrap();
        let r = &report.summary["result"];
        let w: Vec<f64> = r["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().filter(|x| **x > 0.0).count() <= 2);
        let evals: Vec<u64> = r["expert_evaluations"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        for (x, n) in w.iter().zip(evals) {
            assert_eq!(n, (*x > 0.0) as u64);
        }
    }

    #[test]
    fn optd_episode_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "[scenario]\nkind = \"optd\"\n[optd]\nepisodes = 30\n");
        let report = run_scenario(&cfg, &RunOptions::default()).unwrap();
        let rows = Metrics::read_csv(&report.metrics_path).unwrap();
        assert_eq!(rows.rows().len(), 90);
        assert!(rows.rows().iter().filter(|r| r.metric == "regret").all(|r| r.value >= 0.0));
    }
}
