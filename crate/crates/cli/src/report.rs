//! `report.json` and `report.txt`.

use std::fmt::Write as _;
use std::path::Path;

use ahl::analysis::ExperimentReport;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Build identification stamped into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub tool: String,
    pub version: String,
    pub git: String,
}

impl Stamp {
    pub fn current() -> Self {
        Self {
            tool: "ahl".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git: env!("AHL_GIT_HASH").into(),
        }
    }
}

/// One failed check, named `report/check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub report: String,
    pub check: String,
    pub observed: f64,
    pub tolerance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stamp: Stamp,
    pub config: ExperimentConfig,
    pub passed: bool,
    pub failures: Vec<Failure>,
    pub reports: Vec<ExperimentReport>,
}

impl RunReport {
    pub fn new(config: ExperimentConfig, reports: Vec<ExperimentReport>) -> Self {
        let failures: Vec<Failure> = reports
            .iter()
            .flat_map(|r| {
                r.checks.iter().filter(|c| !c.passed).map(|c| Failure {
                    report: r.name.clone(),
                    check: c.name.clone(),
                    observed: c.observed,
                    tolerance: c.tolerance.clone(),
                })
            })
            .collect();
        Self { stamp: Stamp::current(), config, passed: failures.is_empty(), failures, reports }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} ({})", self.stamp.tool, self.stamp.version, self.stamp.git);
        let _ = writeln!(out, "command: {}  seed: {}", self.config.command, self.config.seed);
        for r in &self.reports {
            out.push('\n');
            out.push_str(&r.to_text());
        }
        out.push('\n');
        if self.passed {
            out.push_str("result: PASS\n");
        } else {
            let _ = writeln!(out, "result: FAIL ({} checks)", self.failures.len());
            for f in &self.failures {
                let _ = writeln!(out, "  {}/{}: observed {:e}, tolerance {}", f.report, f.check, f.observed, f.tolerance);
            }
        }
        out
    }
}

/// Writes both report files into `dir`.
pub fn emit_report(report: &RunReport, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(REPORT_JSON), report.to_json())?;
    std::fs::write(dir.join(REPORT_TXT), report.to_text())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Command, RawConfig};

    fn config() -> ExperimentConfig {
        RawConfig { command: Some(Command::Calibrate), ..Default::default() }.resolve(None).unwrap()
    }

    #[test]
    fn empty_report_round_trips() {
        let r = RunReport::new(config(), vec![ExperimentReport::new("empty")]);
        let back: RunReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(back.passed);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert!(v["reports"][0]["statistics"].as_array().unwrap().is_empty());
        assert_eq!(v["stamp"]["version"], env!("CARGO_PKG_VERSION"));
        assert!(!v["stamp"]["git"].as_str().unwrap().is_empty());
    }

    #[test]
    fn failures_are_listed() {
        let mut e = ExperimentReport::new("x");
        e.check("ok", 1.0, "< 2", true);
        e.check("bad", 3.0, "< 2", false);
        let r = RunReport::new(config(), vec![e]);
        assert!(!r.passed);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].check, "bad");
        assert!(r.to_text().contains("x/bad"));
    }
}
