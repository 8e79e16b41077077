//! Monte Carlo scenarios, plasmode resampling, replication and metrics.

mod metrics;
mod plasmode;
mod report;
mod runner;
mod scenario;

pub use metrics::{compute_metrics, Metrics};
pub use plasmode::{counterfactual_truth as plasmode_counterfactual_truth, fit_generators, plasmode_dataset, run_plasmode, PlasmodeConfig};
pub use report::{FailureNote, ReportRow, ScenarioReport, TOOL, VERSION};
pub use runner::{run_replications, run_scenario, scenario_settings, summarize, with_crude, Replication};
pub use scenario::{
    counterfactual_truth, simulate_dataset, simulate_large, true_outcome_spec, true_treatment_spec, Scenario,
    ScenarioConfig, TruthWeight, BETA_T_STRONG, BETA_T_WEAK, COLUMNS, GAMMA_Y_STRONG, GAMMA_Y_WEAK, LAMBDA,
};
