use serde::{Deserialize, Serialize};

use crate::estimate::EffectEstimate;

/// Performance of one estimator for one parameter over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bias: f64,
    /// Sample standard deviation; absent with fewer than two estimates.
    pub std: Option<f64>,
    pub rmse: f64,
    /// Share of intervals containing the truth, over estimates that carry
    /// a variance; absent when none does.
    pub coverage: Option<f64>,
    pub count: usize,
}

/// Bias, standard deviation, RMSE and coverage of `estimates` around
/// `truth`. Returns `None` for an empty list.
pub fn compute_metrics(estimates: &[EffectEstimate], truth: f64) -> Option<Metrics> {
    let r = estimates.len();
    if r == 0 {
        return None;
    }
    let mean = estimates.iter().map(|e| e.tau_hat).sum::<f64>() / r as f64;
    let ss: f64 = estimates.iter().map(|e| (e.tau_hat - mean).powi(2)).sum();
    let std = (r >= 2).then(|| (ss / (r - 1) as f64).sqrt());
    let mse = estimates.iter().map(|e| (e.tau_hat - truth).powi(2)).sum::<f64>() / r as f64;
    let with_var: Vec<&EffectEstimate> = estimates.iter().filter(|e| e.has_variance()).collect();
    let coverage = (!with_var.is_empty())
        .then(|| with_var.iter().filter(|e| e.covers(truth)).count() as f64 / with_var.len() as f64);
    Some(Metrics {
        bias: mean - truth,
        std,
        rmse: mse.sqrt(),
        coverage,
        count: r,
    })
}
