//! Command-line front end.
//!
//! Every flag can also be set through an `MLTE_*` environment variable.
//! Report files depend only on the data, the resolved configuration and
//! the seed; timing and the worker count go to a `<out>.run.json` sidecar
//! and to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{analyze, AnalysisSettings};
use crate::error::{Error, Result};
use crate::estimate::{Estimand, Method};
use crate::learners::{fit_propensity, Regime, DEFAULT_FOLDS};
use crate::matching::Metric;
use crate::reporting::{all_pairs_table, Adjustment, ContrastTable};
use crate::rng::{derive_seed, Purpose};
use crate::simengine::{
    fit_generators, run_plasmode, run_scenario, simulate_dataset, true_treatment_spec, FailureNote, PlasmodeConfig,
    Scenario, ScenarioConfig, TOOL, VERSION,
};
use crate::tabular::{load_csv, quantile_sorted, ContrastSet, Dataset, DesignSpec, OutcomeKind};

#[derive(Debug, Parser)]
#[command(name = "mlte", version, about = "Pairwise effects of multi-level treatments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate all pairwise contrasts on a dataset.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo scenario.
    Simulate(SimulateArgs),
    /// Run a plasmode simulation built on a dataset.
    Plasmode(PlasmodeArgs),
    /// Summarize fitted treatment probabilities (overlap diagnostics).
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KindArg {
    Auto,
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastsArg {
    /// Every level against level 1.
    Reference,
    /// Every unordered pair.
    All,
}

/// Where and how results are written. Not part of the echoed config.
#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Worker threads; 0 uses every available core.
    #[arg(long, env = "MLTE_WORKERS", default_value_t = 0)]
    pub workers: usize,
    /// Output file; stdout when absent.
    #[arg(long, env = "MLTE_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, env = "MLTE_FORMAT", value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV file with a header row.
    #[arg(long, env = "MLTE_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "MLTE_TREATMENT")]
    pub treatment: String,
    #[arg(long, env = "MLTE_OUTCOME")]
    pub outcome: String,
    /// Comma-separated covariates; every other column when absent.
    #[arg(long, env = "MLTE_COVARIATES", value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[arg(long, env = "MLTE_OUTCOME_KIND", value_enum, default_value_t = KindArg::Auto)]
    pub outcome_kind: KindArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MethodArgs {
    /// Comma-separated subset of crude,stan,ipw,match,bcm,tmle,ow,aow, or `all`.
    #[arg(long, env = "MLTE_METHODS", default_value = "all")]
    pub methods: String,
    #[arg(long, env = "MLTE_REGIME", default_value = "mainterms")]
    pub regime: Regime,
    /// Matches per unit.
    #[arg(long, env = "MLTE_M", default_value_t = 1)]
    pub m: usize,
    #[arg(long, env = "MLTE_METRIC", default_value = "euclidean")]
    pub metric: Metric,
    /// Bootstrap resamples for the standardization variance; 0 skips it.
    #[arg(long, env = "MLTE_BOOTSTRAP", default_value_t = 200)]
    pub bootstrap: usize,
    /// Cross-validation folds of the super learner.
    #[arg(long, env = "MLTE_FOLDS", default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    #[arg(long, env = "MLTE_SEED", default_value_t = 1)]
    pub seed: u64,
}

impl MethodArgs {
    pub fn methods(&self) -> Result<Vec<Method>> {
        if self.methods.trim().eq_ignore_ascii_case("all") {
            Ok(Method::ALL.to_vec())
        } else {
            Method::parse_list(&self.methods)
        }
    }

    fn settings(&self) -> AnalysisSettings {
        let mut s = AnalysisSettings::new(self.regime);
        s.outcome.folds = self.folds;
        s.bootstrap = self.bootstrap;
        s.m = self.m;
        s.metric = self.metric;
        s.seed = self.seed;
        s
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// One of t-y-, t+y-, t-y+, t+y+.
    #[arg(long, env = "MLTE_SCENARIO")]
    pub scenario: Scenario,
    #[arg(long, env = "MLTE_N", default_value_t = 1000)]
    pub n: usize,
    #[arg(long, env = "MLTE_REPS", default_value_t = 1000)]
    pub reps: usize,
    /// Overrides the effects of levels 2 and 3, as `l1,l2`.
    #[arg(long, env = "MLTE_LAMBDA", value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, env = "MLTE_CONTRASTS", value_enum, default_value_t = ContrastsArg::Reference)]
    pub contrasts: ContrastsArg,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlasmodeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Resample size.
    #[arg(long, env = "MLTE_N", default_value_t = 2000)]
    pub n: usize,
    #[arg(long, env = "MLTE_REPS", default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, env = "MLTE_CONTRASTS", value_enum, default_value_t = ContrastsArg::Reference)]
    pub contrasts: ContrastsArg,
    #[command(flatten)]
    pub method: MethodArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiagnoseArgs {
    /// CSV file; use `--scenario` instead to diagnose a simulated sample.
    #[arg(long, env = "MLTE_DATA", conflicts_with = "scenario")]
    pub data: Option<PathBuf>,
    #[arg(long, env = "MLTE_TREATMENT")]
    pub treatment: Option<String>,
    #[arg(long, env = "MLTE_OUTCOME")]
    pub outcome: Option<String>,
    #[arg(long, env = "MLTE_COVARIATES", value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[arg(long, env = "MLTE_SCENARIO")]
    pub scenario: Option<Scenario>,
    /// Sample size of the simulated sample.
    #[arg(long, env = "MLTE_N", default_value_t = 2000)]
    pub n: usize,
    #[arg(long, env = "MLTE_REGIME", default_value = "mainterms")]
    pub regime: Regime,
    #[arg(long, env = "MLTE_SEED", default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

/// Run details that vary between otherwise identical runs.
#[derive(Debug, Serialize)]
struct RunLog<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    seed: u64,
    workers: usize,
    started_unix: u64,
    wall_clock_seconds: f64,
    failures: &'a [FailureNote],
}

fn contrast_set(arg: ContrastsArg, k: usize) -> ContrastSet {
    match arg {
        ContrastsArg::Reference => ContrastSet::against_reference(k),
        ContrastsArg::All => ContrastSet::all_pairs(k),
    }
}

fn read_header(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    Ok(r.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

fn load(path: &Path, treatment: &str, outcome: &str, covariates: Option<&[String]>, kind: KindArg) -> Result<Dataset> {
    let covariates: Vec<String> = match covariates {
        Some(c) => c.to_vec(),
        None => read_header(path)?
            .into_iter()
            .filter(|h| h != treatment && h != outcome)
            .collect(),
    };
    if covariates.is_empty() {
        return Err(Error::Config("no covariates".into()));
    }
    let kind = match kind {
        KindArg::Auto => None,
        KindArg::Binary => Some(OutcomeKind::Binary),
        KindArg::Continuous => Some(OutcomeKind::Continuous),
    };
    load_csv(path, treatment, outcome, &covariates, kind)
}

fn load_data(a: &DataArgs) -> Result<Dataset> {
    load(&a.data, &a.treatment, &a.outcome, a.covariates.as_deref(), a.outcome_kind)
}

fn no_truth(command: &str) -> Error {
    Error::Config(format!(
        "`{command}` has no true model specification; use --regime mainterms or ml"
    ))
}

/// Writes `body` to `--out` (plus the run log) or stdout.
fn emit(output: &OutputArgs, body: &str, log: &RunLog<'_>) -> Result<()> {
    match &output.out {
        Some(path) => {
            fs::write(path, body)?;
            let mut side = path.as_os_str().to_owned();
            side.push(".run.json");
            fs::write(PathBuf::from(side), serde_json::to_string_pretty(log)? + "\n")?;
        }
        None => print!("{body}"),
    }
    eprintln!(
        "{} {}: {} workers, {:.2} s",
        log.tool, log.command, log.workers, log.wall_clock_seconds
    );
    for f in log.failures {
        eprintln!("warning: {} failed {} time(s); first error: {}", f.method, f.count, f.first);
    }
    Ok(())
}

fn resolve_workers(w: usize) -> usize {
    if w > 0 {
        w
    } else {
        std::thread::available_parallelism().map_or(1, usize::from)
    }
}

/// Runs `f` on a dedicated pool of the requested size and writes its output.
fn run_with<F>(command: &str, seed: u64, output: &OutputArgs, f: F) -> Result<()>
where
    F: FnOnce() -> Result<(String, Vec<FailureNote>)> + Send,
{
    let workers = resolve_workers(output.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let (body, failures) = pool.install(f)?;
    let log = RunLog {
        tool: TOOL,
        version: VERSION,
        command,
        seed,
        workers,
        started_unix,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        failures: &failures,
    };
    emit(output, &body, &log)
}

/// Results of `estimate`: one contrast table per method.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub n: usize,
    pub levels: Vec<String>,
    pub outcome_model: Option<String>,
    pub treatment_model: Option<String>,
    pub tables: Vec<ContrastTable>,
    pub failures: Vec<FailureNote>,
}

impl EstimateReport {
    fn metadata(&self) -> Result<String> {
        let mut out = format!("# tool: {} {}\n# command: {}\n# seed: {}\n", self.tool, self.version, self.command, self.seed);
        out += &format!("# config: {}\n", serde_json::to_string(&self.config)?);
        out += &format!("# levels: {}\n", self.levels.join(" | "));
        if let Some(m) = &self.outcome_model {
            out += &format!("# outcome model: {m}\n");
        }
        if let Some(m) = &self.treatment_model {
            out += &format!("# treatment model: {m}\n");
        }
        for f in &self.failures {
            out += &format!("# failures: {} {} (first: {})\n", f.method, f.count, f.first);
        }
        Ok(out)
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Json => Ok(serde_json::to_string_pretty(self)? + "\n"),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(ContrastTable::CSV_HEADER)?;
                for t in &self.tables {
                    t.write_csv(&mut w)?;
                }
                let bytes = w.into_inner().map_err(|e| e.into_error())?;
                Ok(self.metadata()? + &String::from_utf8(bytes).expect("csv output is utf-8"))
            }
            Format::Text => {
                let mut out = self.metadata()?;
                for t in &self.tables {
                    out.push('\n');
                    out += &t.to_text();
                }
                Ok(out)
            }
        }
    }
}

pub fn estimate_report(args: &EstimateArgs) -> Result<EstimateReport> {
    if args.method.regime == Regime::Correct {
        return Err(no_truth("estimate"));
    }
    let data = load_data(&args.data)?;
    let methods = args.method.methods()?;
    let estimands: Vec<Estimand> = methods.iter().map(Method::estimand).collect();
    if estimands.contains(&Estimand::Overlap) && estimands.contains(&Estimand::Population) {
        eprintln!("warning: OW and A-OW target the overlap population; other methods target the whole population");
    }
    let pairs = ContrastSet::all_pairs(data.k());
    let analysis = analyze(&data, &methods, pairs.pairs(), &args.method.settings())?;
    let mut tables = Vec::new();
    let mut failures = Vec::new();
    for r in &analysis.results {
        match &r.estimates {
            Ok(est) => tables.push(all_pairs_table(est, data.labels(), Adjustment::Holm)?),
            Err(msg) => failures.push(FailureNote {
                method: r.method.label().into(),
                count: 1,
                first: msg.clone(),
            }),
        }
    }
    Ok(EstimateReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: "estimate".into(),
        seed: args.method.seed,
        config: serde_json::to_value(args)?,
        n: data.n(),
        levels: data.labels().to_vec(),
        outcome_model: analysis.outcome.map(|o| o.description),
        treatment_model: analysis.propensity.map(|p| p.description),
        tables,
        failures,
    })
}

pub fn scenario_config(args: &SimulateArgs) -> Result<ScenarioConfig> {
    if args.reps == 0 || args.n == 0 {
        return Err(Error::Config("n and reps must be positive".into()));
    }
    let mut cfg = ScenarioConfig::new(args.scenario, args.n, args.reps, args.method.seed, args.method.regime);
    if let Some(l) = &args.lambda {
        let [l1, l2] = l[..] else {
            return Err(Error::Config("--lambda takes two values".into()));
        };
        cfg.lambda = [l1, l2];
    }
    cfg.bootstrap = args.method.bootstrap;
    cfg.m = args.method.m;
    cfg.metric = args.method.metric;
    cfg.folds = args.method.folds;
    Ok(cfg)
}

fn render_scenario(report: &crate::simengine::ScenarioReport, format: Format) -> Result<String> {
    match format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json(),
        Format::Text => Ok(report.to_text()),
    }
}

pub fn plasmode_config(args: &PlasmodeArgs) -> Result<PlasmodeConfig> {
    if args.method.regime == Regime::Correct {
        return Err(no_truth("plasmode"));
    }
    let source = load_data(&args.data)?;
    let (outcome, treatment) = fit_generators(&source, derive_seed(args.method.seed, 0, Purpose::Outcome))?;
    PlasmodeConfig::new(source, outcome, treatment, args.n, args.reps, args.method.seed, args.method.settings())
}

/// Distribution of one level's fitted probability over a group of rows.
#[derive(Debug, Clone, Serialize)]
pub struct ProbabilitySummary {
    pub level: String,
    /// `all` or the observed treatment group.
    pub group: String,
    pub count: usize,
    pub min: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
    pub max: f64,
    pub below_001: usize,
    pub below_005: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub model: String,
    pub n: usize,
    pub rows: Vec<ProbabilitySummary>,
}

fn summarize_probs(level: &str, group: &str, mut v: Vec<f64>) -> ProbabilitySummary {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| if v.is_empty() { f64::NAN } else { quantile_sorted(&v, p) };
    ProbabilitySummary {
        level: level.into(),
        group: group.into(),
        count: v.len(),
        min: q(0.0),
        q05: q(0.05),
        q25: q(0.25),
        median: q(0.5),
        q75: q(0.75),
        q95: q(0.95),
        max: q(1.0),
        below_001: v.iter().filter(|&&p| p < 0.01).count(),
        below_005: v.iter().filter(|&&p| p < 0.05).count(),
    }
}

pub fn diagnose_report(args: &DiagnoseArgs) -> Result<DiagnoseReport> {
    let (data, truth): (Dataset, Option<DesignSpec>) = match (&args.data, args.scenario) {
        (Some(path), _) => {
            let t = args.treatment.as_deref().ok_or_else(|| Error::Config("--treatment is required".into()))?;
            let y = args.outcome.as_deref().ok_or_else(|| Error::Config("--outcome is required".into()))?;
            (load(path, t, y, args.covariates.as_deref(), KindArg::Auto)?, None)
        }
        (None, Some(s)) => {
            let cfg = ScenarioConfig::new(s, args.n, 1, args.seed, args.regime);
            (simulate_dataset(&cfg, 0)?, Some(true_treatment_spec()))
        }
        (None, None) => return Err(Error::Config("either --data or --scenario is required".into())),
    };
    if args.regime == Regime::Correct && truth.is_none() {
        return Err(no_truth("diagnose"));
    }
    let fit = fit_propensity(&data, args.regime, truth.as_ref())?;
    let mut rows = Vec::new();
    for (l, level) in data.labels().iter().enumerate() {
        let col: Vec<f64> = fit.probs.column(l).iter().copied().collect();
        rows.push(summarize_probs(level, "all", col.clone()));
        for (g, group) in data.labels().iter().enumerate() {
            let v = col.iter().zip(data.t()).filter(|(_, &t)| t == g).map(|(&p, _)| p).collect();
            rows.push(summarize_probs(level, group, v));
        }
    }
    Ok(DiagnoseReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: "diagnose".into(),
        seed: args.seed,
        config: serde_json::to_value(args)?,
        model: fit.description.clone(),
        n: data.n(),
        rows,
    })
}

impl DiagnoseReport {
    pub fn render(&self, format: Format) -> Result<String> {
        let meta = format!(
            "# tool: {} {}\n# command: {}\n# seed: {}\n# config: {}\n# treatment model: {}\n",
            self.tool,
            self.version,
            self.command,
            self.seed,
            serde_json::to_string(&self.config)?,
            self.model
        );
        match format {
            Format::Json => Ok(serde_json::to_string_pretty(self)? + "\n"),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                for r in &self.rows {
                    w.serialize(r)?;
                }
                let bytes = w.into_inner().map_err(|e| e.into_error())?;
                Ok(meta + &String::from_utf8(bytes).expect("csv output is utf-8"))
            }
            Format::Text => {
                let mut out = meta;
                out += &format!(
                    "{:<12} {:<12} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>6} {:>6}\n",
                    "P(T=level)", "group", "n", "min", "q05", "median", "q95", "max", "<0.01", "<0.05"
                );
                for r in &self.rows {
                    out += &format!(
                        "{:<12} {:<12} {:>6} {:>9.2e} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6}\n",
                        r.level, r.group, r.count, r.min, r.q05, r.median, r.q95, r.max, r.below_001, r.below_005
                    );
                }
                Ok(out)
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate(args) => run_with("estimate", args.method.seed, &args.output, || {
            let report = estimate_report(&args)?;
            Ok((report.render(args.output.format)?, report.failures))
        }),
        Command::Simulate(args) => run_with("simulate", args.method.seed, &args.output, || {
            let cfg = scenario_config(&args)?;
            let methods = args.method.methods()?;
            let report = run_scenario(&cfg, &methods, &contrast_set(args.contrasts, 3))?;
            if args.output.out.is_some() && args.output.format != Format::Text {
                eprint!("{}", report.to_text());
            }
            Ok((render_scenario(&report, args.output.format)?, report.failures))
        }),
        Command::Plasmode(args) => run_with("plasmode", args.method.seed, &args.output, || {
            let cfg = plasmode_config(&args)?;
            let methods = args.method.methods()?;
            let report = run_plasmode(&cfg, &methods, &contrast_set(args.contrasts, cfg.source.k()))?;
            if args.output.out.is_some() && args.output.format != Format::Text {
                eprint!("{}", report.to_text());
            }
            Ok((render_scenario(&report, args.output.format)?, report.failures))
        }),
        Command::Diagnose(args) => run_with("diagnose", args.seed, &args.output, || {
            let report = diagnose_report(&args)?;
            Ok((report.render(args.output.format)?, Vec::new()))
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_methods_and_regimes() {
        let cli = Cli::try_parse_from([
            "mlte", "simulate", "--scenario", "t+y+", "--regime", "ml", "--methods", "aow,ipw", "--lambda", "0,0",
        ])
        .unwrap();
        let Command::Simulate(a) = cli.command else { panic!() };
        assert_eq!(a.scenario, Scenario::StrongStrong);
        assert_eq!(a.method.regime, Regime::Ml);
        assert_eq!(a.method.methods().unwrap(), vec![Method::Ipw, Method::Aow]);
        assert_eq!(a.method.bootstrap, 200);
        let cfg = scenario_config(&a).unwrap();
        assert_eq!(cfg.lambda, [0.0, 0.0]);
        assert!(Cli::try_parse_from(["mlte", "simulate", "--scenario", "t0y0"]).is_err());
    }

    #[test]
    fn config_echo_leaves_out_output_settings() {
        let cli = Cli::try_parse_from([
            "mlte", "simulate", "--scenario", "t-y-", "--workers", "8", "--out", "x.csv",
        ])
        .unwrap();
        let Command::Simulate(a) = cli.command else { panic!() };
        let v = serde_json::to_value(&a).unwrap();
        assert!(v.get("output").is_none());
        assert_eq!(v["method"]["seed"], 1);
    }
}
