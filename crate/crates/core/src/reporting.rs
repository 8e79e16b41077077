//! All-pairs contrast tables with Holm-adjusted Wald p-values, and their
//! CSV, JSON and plain-text renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimate::{EffectEstimate, Estimand, Method};
use crate::tabular::Pair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjustment {
    None,
    Holm,
}

/// Holm step-down adjustment. Entries are adjusted in ascending order of
/// the raw values, each at least as large as the one before it.
pub fn holm_adjust(pvalues: &[f64]) -> Vec<f64> {
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    // Stable, so ties keep their input order.
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (j, &i) in order.iter().enumerate() {
        let adj = ((m - j) as f64 * pvalues[i]).min(1.0);
        running = running.max(adj);
        out[i] = running;
    }
    out
}

/// Two-sided Wald p-value of `tau / se` against the standard normal.
pub fn wald_pvalue(tau: f64, variance: f64) -> Option<f64> {
    if !variance.is_finite() || !tau.is_finite() {
        return None;
    }
    if tau == 0.0 {
        return Some(1.0);
    }
    if variance == 0.0 {
        return Some(0.0);
    }
    let z = (tau / variance.sqrt()).abs();
    let phi = Normal::standard();
    Some((2.0 * phi.sf(z)).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub pair: Pair,
    /// Display label such as `Air tanker vs HAC1H`.
    pub label: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub estimand: Estimand,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastTable {
    pub method: Method,
    pub estimand: Estimand,
    pub adjustment: Adjustment,
    pub rows: Vec<ContrastRow>,
}

/// Builds the table of every unordered pair among `labels.len()` levels
/// from one method's estimates. Rows without a variance get no p-value and
/// are left out of the adjustment.
pub fn all_pairs_table(estimates: &[EffectEstimate], labels: &[String], adjustment: Adjustment) -> Result<ContrastTable> {
    let k = labels.len();
    let first = estimates
        .first()
        .ok_or_else(|| Error::Config("no estimates to tabulate".into()))?;
    let method = first.method;
    if estimates.iter().any(|e| e.method != method) {
        return Err(Error::Config("a contrast table holds one method".into()));
    }
    let mut rows = Vec::with_capacity(k * (k - 1) / 2);
    for r in 0..k {
        for t in (r + 1)..k {
            let e = estimates
                .iter()
                .find(|e| (e.pair.treated, e.pair.reference) == (t, r) || (e.pair.treated, e.pair.reference) == (r, t))
                .ok_or_else(|| Error::Config(format!("missing estimate for {} vs {}", labels[t], labels[r])))?;
            let has_var = e.has_variance();
            rows.push(ContrastRow {
                pair: e.pair,
                label: format!("{} vs {}", labels[e.pair.treated], labels[e.pair.reference]),
                estimate: e.tau_hat,
                std_error: has_var.then(|| e.std_error()),
                ci95: has_var.then_some(e.ci95),
                p_raw: wald_pvalue(e.tau_hat, e.variance),
                p_adjusted: None,
                estimand: e.estimand,
                method,
            });
        }
    }
    if estimates.len() != rows.len() {
        return Err(Error::Config(format!(
            "expected {} pairwise estimates, got {}",
            rows.len(),
            estimates.len()
        )));
    }
    let idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].p_raw.is_some()).collect();
    let raw: Vec<f64> = idx.iter().map(|&i| rows[i].p_raw.unwrap()).collect();
    let adjusted = match adjustment {
        Adjustment::Holm => holm_adjust(&raw),
        Adjustment::None => raw,
    };
    for (&i, p) in idx.iter().zip(adjusted) {
        rows[i].p_adjusted = Some(p);
    }
    Ok(ContrastTable {
        method,
        estimand: first.estimand,
        adjustment,
        rows,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

impl ContrastTable {
    pub const CSV_HEADER: [&'static str; 10] = [
        "method",
        "estimand",
        "contrast",
        "estimate",
        "std_error",
        "ci_low",
        "ci_high",
        "p_raw",
        "p_adjusted",
        "adjustment",
    ];

    /// Appends one CSV record per row, at full precision.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let adj = match self.adjustment {
            Adjustment::None => "none",
            Adjustment::Holm => "holm",
        };
        for r in &self.rows {
            w.write_record([
                self.method.label().to_string(),
                r.estimand.to_string(),
                r.label.clone(),
                r.estimate.to_string(),
                fmt_opt(r.std_error),
                fmt_opt(r.ci95.map(|c| c.0)),
                fmt_opt(r.ci95.map(|c| c.1)),
                fmt_opt(r.p_raw),
                fmt_opt(r.p_adjusted),
                adj.to_string(),
            ])?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER)?;
        self.write_csv(&mut w)?;
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<ContrastTable> {
        Ok(serde_json::from_str(text)?)
    }

    /// Aligned table with estimates and intervals to three decimals.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
        let mut out = String::new();
        writeln!(out, "{} ({} estimand)", self.method.label(), self.estimand).unwrap();
        writeln!(
            out,
            "{:<width$} {:>9} {:>20} {:>8} {:>8}",
            "Contrast",
            "Estimate",
            "95% CI",
            "p",
            match self.adjustment {
                Adjustment::Holm => "p (Holm)",
                Adjustment::None => "p (adj)",
            }
        )
        .unwrap();
        for r in &self.rows {
            let ci = r
                .ci95
                .map_or_else(|| "-".to_string(), |(lo, hi)| format!("({lo:.3}, {hi:.3})"));
            writeln!(
                out,
                "{:<width$} {:>9.3} {:>20} {:>8} {:>8}",
                r.label,
                r.estimate,
                ci,
                fmt3(r.p_raw),
                fmt3(r.p_adjusted)
            )
            .unwrap();
        }
        out
    }
}
