//! Replication loop shared by the scenario and plasmode simulations.

use rayon::prelude::*;

use crate::analysis::{analyze, AnalysisSettings, MethodResult};
use crate::error::{Error, Result};
use crate::estimate::{EffectEstimate, Estimand, Method};
use crate::learners::OutcomeLearner;
use crate::rng::{derive_seed, Purpose};
use crate::tabular::{ContrastSet, Pair};

use super::metrics::compute_metrics;
use super::report::{FailureNote, ReportRow, ScenarioReport, TOOL, VERSION};
use super::scenario::{simulate_dataset, ScenarioConfig};

/// Outcome of one replication: every method's results, or the reason the
/// dataset itself could not be produced.
pub type Replication = std::result::Result<Vec<MethodResult>, String>;

/// `methods` with crude added, in canonical order.
pub fn with_crude(methods: &[Method]) -> Vec<Method> {
    let mut out = methods.to_vec();
    out.push(Method::Crude);
    out.sort();
    out.dedup();
    out
}

/// Analysis settings for replication `rep`.
pub fn scenario_settings(cfg: &ScenarioConfig, rep: usize) -> AnalysisSettings {
    AnalysisSettings {
        outcome: OutcomeLearner {
            regime: cfg.outcome_regime,
            truth: Some(cfg.outcome_spec.clone()),
            folds: cfg.folds,
            seed: 0,
        },
        treatment_regime: cfg.treatment_regime,
        treatment_spec: Some(cfg.treatment_spec.clone()),
        bootstrap: cfg.bootstrap,
        m: cfg.m,
        metric: cfg.metric,
        tmle_bounds: None,
        seed: derive_seed(cfg.seed, rep as u64, Purpose::Outcome),
    }
}

/// Runs every replication of the scenario. Replications run in parallel on
/// the current rayon pool; results are collected in replication order.
pub fn run_replications(cfg: &ScenarioConfig, methods: &[Method], pairs: &[Pair]) -> Vec<Replication> {
    (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let data = simulate_dataset(cfg, rep).map_err(|e| format!("data generation: {e}"))?;
            analyze(&data, methods, pairs, &scenario_settings(cfg, rep))
                .map(|a| a.results)
                .map_err(|e| e.to_string())
        })
        .collect()
}

pub fn run_scenario(cfg: &ScenarioConfig, methods: &[Method], contrasts: &ContrastSet) -> Result<ScenarioReport> {
    if cfg.reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    contrasts.check(3)?;
    let methods = with_crude(methods);
    let reps = run_replications(cfg, &methods, contrasts.pairs());
    let (rows, failures) = summarize(&reps, &methods, contrasts.pairs(), &cfg.regime_label(), |p, e| {
        cfg.true_effect(p, e)
    });
    Ok(ScenarioReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: "simulate".into(),
        scenario: cfg.name.clone(),
        regime: cfg.regime_label(),
        n: cfg.n,
        reps: cfg.reps,
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        rows,
        failures,
    })
}

/// Collects estimates per method and pair, in replication order, and
/// scores them against `truth`. A replication that failed as a whole
/// counts as a failure of every method.
pub fn summarize(
    reps: &[Replication],
    methods: &[Method],
    pairs: &[Pair],
    regime: &str,
    truth: impl Fn(Pair, Estimand) -> f64,
) -> (Vec<ReportRow>, Vec<FailureNote>) {
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for &method in methods {
        let mut per_pair: Vec<Vec<EffectEstimate>> = vec![Vec::new(); pairs.len()];
        let mut failed = 0;
        let mut first: Option<String> = None;
        for rep in reps {
            let result = rep.as_ref().and_then(|results| {
                results
                    .iter()
                    .find(|r| r.method == method)
                    .map(|r| &r.estimates)
                    .ok_or(&NOT_RUN)
                    .and_then(|e| e.as_ref())
            });
            match result {
                Ok(est) => {
                    for (slot, e) in per_pair.iter_mut().zip(est) {
                        slot.push(e.clone());
                    }
                }
                Err(msg) => {
                    failed += 1;
                    first.get_or_insert_with(|| msg.clone());
                }
            }
        }
        if let Some(first) = first {
            notes.push(FailureNote {
                method: method.label().into(),
                count: failed,
                first,
            });
        }
        for (pair, est) in pairs.iter().zip(&per_pair) {
            let estimand = method.estimand();
            let tv = truth(*pair, estimand);
            let m = compute_metrics(est, tv);
            rows.push(ReportRow {
                method: method.label().into(),
                regime: regime.into(),
                parameter: pair.parameter(),
                estimand,
                truth: tv,
                bias: m.as_ref().map(|m| m.bias),
                std: m.as_ref().and_then(|m| m.std),
                rmse: m.as_ref().map(|m| m.rmse),
                coverage: m.as_ref().and_then(|m| m.coverage),
                failures: failed,
                used: est.len(),
            });
        }
    }
    (rows, notes)
}

static NOT_RUN: String = String::new();
