use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimate::Estimand;

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// One method and parameter of a simulation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub regime: String,
    pub parameter: String,
    pub estimand: Estimand,
    pub truth: f64,
    pub bias: Option<f64>,
    pub std: Option<f64>,
    pub rmse: Option<f64>,
    pub coverage: Option<f64>,
    /// Replications in which the method produced no estimate.
    pub failures: usize,
    pub used: usize,
}

/// The first error seen for a method that failed in some replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureNote {
    pub method: String,
    pub count: usize,
    pub first: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub scenario: String,
    pub regime: String,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    /// The fully resolved configuration.
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    pub failures: Vec<FailureNote>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn opt3(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

impl ScenarioReport {
    pub fn row(&self, method: &str, parameter: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.parameter == parameter)
    }

    /// Metadata as `#` comment lines, then one CSV row per method and
    /// parameter. The `std` column is left empty when undefined.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "# tool: {} {}", self.tool, self.version).unwrap();
        writeln!(out, "# command: {}", self.command).unwrap();
        writeln!(out, "# scenario: {}", self.scenario).unwrap();
        writeln!(out, "# seed: {}", self.seed).unwrap();
        writeln!(out, "# config: {}", serde_json::to_string(&self.config)?).unwrap();
        for f in &self.failures {
            writeln!(out, "# failures: {} {} (first: {})", f.method, f.count, f.first).unwrap();
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "method", "regime", "parameter", "estimand", "truth", "bias", "std", "rmse", "coverage", "failures", "used",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.regime.clone(),
                r.parameter.clone(),
                r.estimand.to_string(),
                r.truth.to_string(),
                opt(r.bias),
                opt(r.std),
                opt(r.rmse),
                opt(r.coverage),
                r.failures.to_string(),
                r.used.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<ScenarioReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// Aligned table: parameters side by side for each measure, like the
    /// usual simulation tables.
    pub fn to_text(&self) -> String {
        let mut params: Vec<&str> = Vec::new();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !params.contains(&r.parameter.as_str()) {
                params.push(&r.parameter);
            }
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let mut out = String::new();
        writeln!(
            out,
            "{} {}: scenario {}, regime {}, n = {}, reps = {}, seed = {}",
            self.tool, self.command, self.scenario, self.regime, self.n, self.reps, self.seed
        )
        .unwrap();
        let mut header = format!("{:<8}", "Method");
        for measure in ["Bias", "Std", "RMSE", "Coverage"] {
            for p in &params {
                header.push_str(&format!(" {:>14}", format!("{measure} {}", p.trim_start_matches("tau_"))));
            }
        }
        header.push_str(&format!(" {:>8}", "Failed"));
        writeln!(out, "{header}").unwrap();
        for m in &methods {
            let mut line = format!("{m:<8}");
            let rows: Vec<Option<&ReportRow>> = params.iter().map(|p| self.row(m, p)).collect();
            for field in 0..4 {
                for r in &rows {
                    let v = r.and_then(|r| match field {
                        0 => r.bias,
                        1 => r.std,
                        2 => r.rmse,
                        _ => r.coverage,
                    });
                    line.push_str(&format!(" {:>14}", opt3(v)));
                }
            }
            let failed = rows.iter().flatten().map(|r| r.failures).max().unwrap_or(0);
            line.push_str(&format!(" {failed:>8}"));
            writeln!(out, "{line}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> ScenarioReport {
        ScenarioReport {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: "simulate".into(),
            scenario: "t-y-".into(),
            regime: "correct".into(),
            n: 100,
            reps: 2,
            seed: 5,
            config: serde_json::json!({"n": 100}),
            rows: vec![ReportRow {
                method: "A-OW".into(),
                regime: "correct".into(),
                parameter: "tau_21".into(),
                estimand: Estimand::Overlap,
                truth: 1.0,
                bias: Some(0.1234567890123),
                std: None,
                rmse: Some(0.2),
                coverage: Some(0.95),
                failures: 1,
                used: 1,
            }],
            failures: vec![FailureNote {
                method: "A-OW".into(),
                count: 1,
                first: "boom".into(),
            }],
        }
    }

    #[test]
    fn csv_layout() {
        let csv = report().to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# tool: mlte"));
        assert!(lines.iter().any(|l| l.starts_with("# seed: 5")));
        let header = lines.iter().position(|l| l.starts_with("method,")).unwrap();
        assert_eq!(
            lines[header],
            "method,regime,parameter,estimand,truth,bias,std,rmse,coverage,failures,used"
        );
        assert_eq!(lines[header + 1], "A-OW,correct,tau_21,overlap,1,0.1234567890123,,0.2,0.95,1,1");
    }

    #[test]
    fn json_round_trip() {
        let r = report();
        assert_eq!(ScenarioReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    #[test]
    fn text_table_marks_missing_std() {
        let t = report().to_text();
        assert!(t.contains("A-OW"));
        assert!(t.contains("0.123"));
        assert!(t.contains(" -"));
    }
}
