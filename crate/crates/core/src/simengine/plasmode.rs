//! Plasmode simulation: covariates resampled from a source dataset,
//! treatment and binary outcome regenerated from models fitted to it.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::analysis::{analyze, AnalysisSettings};
use crate::error::{Error, Result};
use crate::estimate::{Estimand, Method};
use crate::learners::{fit_propensity, OutcomeFit, OutcomeLearner, PropensityFit, Regime};
use crate::rng::{derive_seed, substream, Purpose};
use crate::tabular::{ContrastSet, Dataset, OutcomeKind, Pair};
use crate::outcome_methods::MAX_REDRAWS;

use super::report::{ScenarioReport, TOOL, VERSION};
use super::runner::{summarize, with_crude, Replication};

#[derive(Debug, Clone)]
pub struct PlasmodeConfig {
    pub source: Dataset,
    pub generator_outcome: OutcomeFit,
    pub generator_treatment: PropensityFit,
    pub resample_size: usize,
    pub reps: usize,
    pub seed: u64,
    /// Estimation settings; the seed is replaced per replication.
    pub settings: AnalysisSettings,
    probs: DMatrix<f64>,
    means: DMatrix<f64>,
}

impl PlasmodeConfig {
    /// Evaluates both generators on every source row once.
    pub fn new(
        source: Dataset,
        generator_outcome: OutcomeFit,
        generator_treatment: PropensityFit,
        resample_size: usize,
        reps: usize,
        seed: u64,
        settings: AnalysisSettings,
    ) -> Result<PlasmodeConfig> {
        if resample_size < 2 * source.k() {
            return Err(Error::Config(format!("resample size {resample_size} is too small")));
        }
        if resample_size > 100 * source.n() {
            return Err(Error::Config(format!(
                "resample size {resample_size} exceeds 100 times the source size {}",
                source.n()
            )));
        }
        let probs = generator_treatment.predict(source.x());
        let means = generator_outcome.predict_all(source.x()).map(|v| v.clamp(0.0, 1.0));
        if probs.shape() != (source.n(), source.k()) || means.shape() != (source.n(), source.k()) {
            return Err(Error::Config("generators do not match the source dataset".into()));
        }
        Ok(PlasmodeConfig {
            source,
            generator_outcome,
            generator_treatment,
            resample_size,
            reps,
            seed,
            settings,
            probs,
            means,
        })
    }

    /// Generator probabilities `P(T = t | X)` on the source rows.
    pub fn source_probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    /// Generator outcome probabilities `P(Y = 1 | T = t, X)` on the source rows.
    pub fn source_means(&self) -> &DMatrix<f64> {
        &self.means
    }

    fn overlap_h(&self, i: usize) -> f64 {
        1.0 / self.probs.row(i).iter().map(|p| 1.0 / p.max(f64::MIN_POSITIVE)).sum::<f64>()
    }

    /// The effect of `pair` in the source population: the plain average of
    /// generator risk differences, or the `h(X)`-weighted one.
    pub fn truth(&self, pair: Pair, estimand: Estimand) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..self.source.n() {
            let w = match estimand {
                Estimand::Population => 1.0,
                Estimand::Overlap => self.overlap_h(i),
            };
            num += w * (self.means[(i, pair.treated)] - self.means[(i, pair.reference)]);
            den += w;
        }
        num / den
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({
            "source_n": self.source.n(),
            "source_columns": self.source.columns(),
            "levels": self.source.labels(),
            "generator_outcome": self.generator_outcome.description,
            "generator_treatment": self.generator_treatment.description,
            "resample_size": self.resample_size,
            "reps": self.reps,
            "seed": self.seed,
            "outcome_regime": self.settings.outcome.regime,
            "treatment_regime": self.settings.treatment_regime,
            "bootstrap": self.settings.bootstrap,
            "m": self.settings.m,
            "metric": self.settings.metric,
            "folds": self.settings.outcome.folds,
        })
    }
}

/// Flexible generators fitted on the source: the adaptive spline
/// multinomial for treatment and the super learner for the outcome.
pub fn fit_generators(source: &Dataset, seed: u64) -> Result<(OutcomeFit, PropensityFit)> {
    if source.outcome_kind() != OutcomeKind::Binary {
        return Err(Error::InvalidData("plasmode generators need a binary outcome".into()));
    }
    let outcome = OutcomeLearner::new(Regime::Ml, None).with_seed(seed).fit(source)?;
    let treatment = fit_propensity(source, Regime::Ml, None)?;
    Ok((outcome, treatment))
}

/// Monte Carlo check of [`PlasmodeConfig::truth`]: draws source rows and
/// both potential outcomes, and averages the contrast with the requested
/// weights.
pub fn counterfactual_truth(cfg: &PlasmodeConfig, pair: Pair, estimand: Estimand, draws: usize, seed: u64) -> f64 {
    let mut rng = substream(seed, 0, Purpose::Truth);
    let n = cfg.source.n();
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..draws {
        let i = rng.random_range(0..n);
        let y1 = f64::from(u8::from(rng.random::<f64>() < cfg.means[(i, pair.treated)]));
        let y0 = f64::from(u8::from(rng.random::<f64>() < cfg.means[(i, pair.reference)]));
        let w = match estimand {
            Estimand::Population => 1.0,
            Estimand::Overlap => cfg.overlap_h(i),
        };
        num += w * (y1 - y0);
        den += w;
    }
    num / den
}

fn draw_level<R: Rng>(rng: &mut R, p: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (l, q) in p.enumerate() {
        acc += q;
        last = l;
        if u < acc {
            return l;
        }
    }
    last
}

/// Replication `rep`: resampled covariates with regenerated treatment and
/// outcome. A draw leaving a level empty is redrawn up to the retry limit.
pub fn plasmode_dataset(cfg: &PlasmodeConfig, rep: usize) -> Result<Dataset> {
    let mut rng = substream(cfg.seed, rep as u64, Purpose::Resample);
    let (n, p, k) = (cfg.resample_size, cfg.source.p(), cfg.source.k());
    let mut last_err = None;
    for _ in 0..MAX_REDRAWS {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.source.n())).collect();
        let x = DMatrix::from_fn(n, p, |i, j| cfg.source.x()[(rows[i], j)]);
        let mut t = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for &r in &rows {
            let level = draw_level(&mut rng, cfg.probs.row(r).iter().copied());
            t.push(level);
            y.push(f64::from(u8::from(rng.random::<f64>() < cfg.means[(r, level)])));
        }
        let built = Dataset::new(cfg.source.columns().to_vec(), x, t, k, y)
            .and_then(|d| d.with_outcome_kind(OutcomeKind::Binary))
            .and_then(|d| d.with_labels(cfg.source.labels().to_vec()));
        match built {
            Ok(d) => return Ok(d),
            Err(e) => last_err = Some(e),
        }
    }
    Err(Error::InvalidData(format!(
        "no usable resample after {MAX_REDRAWS} draws: {}",
        last_err.expect("at least one draw")
    )))
}

pub fn run_plasmode(cfg: &PlasmodeConfig, methods: &[Method], contrasts: &ContrastSet) -> Result<ScenarioReport> {
    if cfg.reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    contrasts.check(cfg.source.k())?;
    let methods = with_crude(methods);
    let pairs = contrasts.pairs();
    let reps: Vec<Replication> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let data = plasmode_dataset(cfg, rep).map_err(|e| format!("resampling: {e}"))?;
            let mut settings = cfg.settings.clone();
            settings.seed = derive_seed(cfg.seed, rep as u64, Purpose::Outcome);
            analyze(&data, &methods, pairs, &settings).map(|a| a.results).map_err(|e| e.to_string())
        })
        .collect();
    let regime = if cfg.settings.outcome.regime == cfg.settings.treatment_regime {
        cfg.settings.outcome.regime.to_string()
    } else {
        format!("outcome={};treatment={}", cfg.settings.outcome.regime, cfg.settings.treatment_regime)
    };
    let (rows, failures) = summarize(&reps, &methods, pairs, &regime, |p, e| cfg.truth(p, e));
    Ok(ScenarioReport {
        tool: TOOL.into(),
        version: VERSION.into(),
        command: "plasmode".into(),
        scenario: "plasmode".into(),
        regime,
        n: cfg.resample_size,
        reps: cfg.reps,
        seed: cfg.seed,
        config: cfg.config_json(),
        rows,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::expit;
    use crate::learners::{LogisticOutcome, MultinomialModel};
    use crate::tabular::DesignSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    /// Two normal covariates, three levels with covariate-driven
    /// assignment, binary outcome.
    fn source(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let t: Vec<usize> = (0..n)
            .map(|i| {
                let s = x[(i, 0)] + 0.5 * rng.sample::<f64, _>(StandardNormal);
                if s < -0.5 {
                    0
                } else if s < 0.5 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let y = (0..n)
            .map(|i| f64::from(u8::from(rng.random::<f64>() < expit(0.3 * x[(i, 1)] + 0.2 * t[i] as f64))))
            .collect();
        Dataset::new(vec!["A".into(), "B".into()], x, t, 3, y).unwrap()
    }

    fn treatment(src: &Dataset) -> PropensityFit {
        let model = MultinomialModel::fit(src, &DesignSpec::main_terms(src.columns(), false)).unwrap();
        PropensityFit::from_model(Arc::new(model), src.x(), "main-terms multinomial")
    }

    fn logistic() -> LogisticOutcome {
        LogisticOutcome {
            intercept: -0.4,
            slopes: vec![0.8, -0.5],
            level_effects: vec![0.0, 0.6, -0.3],
        }
    }

    fn settings() -> AnalysisSettings {
        let mut s = AnalysisSettings::new(Regime::MainTerms);
        s.bootstrap = 0;
        s
    }

    #[test]
    fn null_generator_has_zero_truth_and_centered_estimates() {
        let src = source(800, 1);
        let null = LogisticOutcome {
            level_effects: vec![0.0; 3],
            ..logistic()
        };
        let cfg = PlasmodeConfig::new(
            src.clone(),
            OutcomeFit::from_model(Arc::new(null), "null"),
            treatment(&src),
            600,
            40,
            2,
            settings(),
        )
        .unwrap();
        let contrasts = ContrastSet::against_reference(3);
        for &p in contrasts.pairs() {
            assert_eq!(cfg.truth(p, Estimand::Population), 0.0);
            assert_eq!(cfg.truth(p, Estimand::Overlap), 0.0);
        }
        let r = run_plasmode(&cfg, &[Method::Ow, Method::Aow, Method::Ipw], &contrasts).unwrap();
        for row in r.rows.iter().filter(|r| r.method != "Crude") {
            assert_eq!(row.truth, 0.0);
            let se = row.std.unwrap() / (row.used as f64).sqrt();
            assert!(row.bias.unwrap().abs() < 4.0 * se, "{row:?}");
        }
    }

    #[test]
    fn closed_form_truth_matches_counterfactual_draws() {
        let src = source(2000, 3);
        let gen = logistic();
        let cfg = PlasmodeConfig::new(
            src.clone(),
            OutcomeFit::from_model(Arc::new(gen.clone()), "logistic"),
            treatment(&src),
            1000,
            1,
            4,
            settings(),
        )
        .unwrap();
        let pair = Pair::new(1, 0).unwrap();
        // Independent marginalization of the logistic model over the source rows.
        let closed: f64 = (0..src.n())
            .map(|i| {
                let lin = gen.intercept + 0.8 * src.x()[(i, 0)] - 0.5 * src.x()[(i, 1)];
                expit(lin + 0.6) - expit(lin)
            })
            .sum::<f64>()
            / src.n() as f64;
        let exact = cfg.truth(pair, Estimand::Population);
        assert!((exact - closed).abs() < 1e-12);
        let mc = counterfactual_truth(&cfg, pair, Estimand::Population, 1_000_000, 9);
        assert!((mc - closed).abs() < 0.005, "{mc} vs {closed}");
        let mc_h = counterfactual_truth(&cfg, pair, Estimand::Overlap, 1_000_000, 10);
        assert!((mc_h - cfg.truth(pair, Estimand::Overlap)).abs() < 0.005);
    }

    #[test]
    fn resamples_have_requested_size_and_every_level() {
        let src = source(300, 5);
        let cfg = PlasmodeConfig::new(
            src.clone(),
            OutcomeFit::from_model(Arc::new(logistic()), "logistic"),
            treatment(&src),
            500,
            1,
            6,
            settings(),
        )
        .unwrap();
        let d = plasmode_dataset(&cfg, 0).unwrap();
        assert_eq!(d.n(), 500);
        assert!(d.level_counts().iter().all(|&c| c > 0));
        assert_eq!(d.outcome_kind(), OutcomeKind::Binary);
        assert_eq!(plasmode_dataset(&cfg, 0).unwrap(), d);
        assert_ne!(plasmode_dataset(&cfg, 1).unwrap(), d);
    }

    #[test]
    fn unreachable_level_is_skipped_and_logged() {
        let src = source(300, 7);
        let mut probs = DMatrix::from_element(300, 3, 0.5);
        probs.column_mut(2).fill(0.0);
        let cfg = PlasmodeConfig::new(
            src.clone(),
            OutcomeFit::from_model(Arc::new(logistic()), "logistic"),
            PropensityFit::from_probs(probs),
            200,
            3,
            8,
            settings(),
        )
        .unwrap();
        assert!(plasmode_dataset(&cfg, 0).is_err());
        let r = run_plasmode(&cfg, &[Method::Ow], &ContrastSet::against_reference(3)).unwrap();
        assert!(r.rows.iter().all(|row| row.failures == 3 && row.used == 0));
        assert!(r.failures[0].first.contains("resampling"));
    }

    #[test]
    fn flexible_generators_separate_the_two_estimands() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1500;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let t: Vec<usize> = (0..n)
            .map(|i| {
                let s = 1.5 * x[(i, 0)] + rng.sample::<f64, _>(StandardNormal);
                usize::from(s > -0.7) + usize::from(s > 0.7)
            })
            .collect();
        // The level-2 effect grows with the first covariate, so weighting
        // toward the overlap region changes the average.
        let y = (0..n)
            .map(|i| {
                let effect = if t[i] == 1 { 1.2 * x[(i, 0)] } else { 0.0 };
                f64::from(u8::from(rng.random::<f64>() < expit(-0.5 + 0.5 * x[(i, 1)] + effect)))
            })
            .collect();
        let src = Dataset::new(vec!["A".into(), "B".into()], x, t, 3, y).unwrap();
        let (out, prop) = fit_generators(&src, 12).unwrap();
        let cfg = PlasmodeConfig::new(src, out, prop, 1000, 1, 13, settings()).unwrap();
        let pair = Pair::new(1, 0).unwrap();
        let (pop, ovl) = (cfg.truth(pair, Estimand::Population), cfg.truth(pair, Estimand::Overlap));
        assert!((pop - ovl).abs() > 1e-3, "{pop} {ovl}");
    }

    #[test]
    fn generators_require_binary_outcome() {
        let src = source(100, 14);
        let y = (0..100).map(|i| i as f64 * 0.1).collect();
        let cont = Dataset::new(src.columns().to_vec(), src.x().clone(), src.t().to_vec(), 3, y).unwrap();
        assert!(fit_generators(&cont, 1).is_err());
    }
}
