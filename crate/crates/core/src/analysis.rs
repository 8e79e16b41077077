//! Runs a list of estimators on one dataset, fitting the outcome model,
//! the treatment model and the match sets once and sharing them.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimate::{estimate_crude, EffectEstimate, Method};
use crate::learners::{fit_propensity, OutcomeFit, OutcomeLearner, PropensityFit, Regime};
use crate::matching::{build_matches, estimate_bcm_with, estimate_match, MatchSets, Metric};
use crate::outcome_methods::{bootstrap_stan_variances, estimate_tmle_with, stan_point, DEFAULT_BOOTSTRAP};
use crate::rng::{derive_seed, Purpose};
use crate::tabular::{Dataset, DesignSpec, Pair};
use crate::weighting::{compute_overlap_weights, estimate_aow_with, estimate_ipw, estimate_ow, OverlapWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSettings {
    pub outcome: OutcomeLearner,
    pub treatment_regime: Regime,
    /// Treatment design for the correct regime.
    pub treatment_spec: Option<DesignSpec>,
    /// Bootstrap resamples for standardization; 0 skips its variance.
    pub bootstrap: usize,
    pub m: usize,
    pub metric: Metric,
    pub tmle_bounds: Option<(f64, f64)>,
    pub seed: u64,
}

impl AnalysisSettings {
    /// Same regime for both models.
    pub fn new(regime: Regime) -> AnalysisSettings {
        AnalysisSettings {
            outcome: OutcomeLearner::new(regime, None),
            treatment_regime: regime,
            treatment_spec: None,
            bootstrap: DEFAULT_BOOTSTRAP,
            m: 1,
            metric: crate::matching::DEFAULT_METRIC,
            tmle_bounds: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    /// One estimate per requested pair, or the reason the method failed.
    pub estimates: std::result::Result<Vec<EffectEstimate>, String>,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub results: Vec<MethodResult>,
    pub outcome: Option<OutcomeFit>,
    pub propensity: Option<PropensityFit>,
    pub overlap: Option<OverlapWeights>,
}

fn shared<T>(r: &Option<std::result::Result<T, String>>) -> std::result::Result<&T, String> {
    r.as_ref().expect("prepared for this method").as_ref().map_err(Clone::clone)
}

fn finite(est: Vec<EffectEstimate>) -> std::result::Result<Vec<EffectEstimate>, String> {
    match est.iter().find(|e| !e.tau_hat.is_finite()) {
        Some(e) => Err(format!("non-finite {} estimate for {}", e.method.label(), e.pair.parameter())),
        None => Ok(est),
    }
}

/// Applies every method in `methods` to every pair in `pairs`. A failure of
/// a shared fit fails only the methods that need it.
pub fn analyze(data: &Dataset, methods: &[Method], pairs: &[Pair], settings: &AnalysisSettings) -> Result<Analysis> {
    for p in pairs {
        p.check(data.k())?;
    }
    if pairs.is_empty() {
        return Err(Error::Config("no contrasts requested".into()));
    }
    let needs = |f: fn(&Method) -> bool| methods.iter().any(f);

    let outcome: Option<std::result::Result<(OutcomeFit, DMatrix<f64>), String>> =
        needs(Method::needs_outcome_model).then(|| {
            let learner = settings.outcome.clone().with_seed(derive_seed(settings.seed, 0, Purpose::Folds));
            learner
                .fit(data)
                .map(|fit| {
                    let mu = fit.predict_all(data.x());
                    (fit, mu)
                })
                .map_err(|e| format!("outcome model: {e}"))
        });
    let propensity: Option<std::result::Result<(PropensityFit, OverlapWeights), String>> =
        needs(Method::needs_propensity).then(|| {
            fit_propensity(data, settings.treatment_regime, settings.treatment_spec.as_ref())
                .map(|p| {
                    let ow = compute_overlap_weights(&p, data.t());
                    (p, ow)
                })
                .map_err(|e| format!("treatment model: {e}"))
        });
    let matches: Option<std::result::Result<MatchSets, String>> = needs(Method::needs_matches)
        .then(|| build_matches(data, settings.m, settings.metric).map_err(|e| format!("matching: {e}")));

    let each = |f: &dyn Fn(Pair) -> Result<EffectEstimate>| -> std::result::Result<Vec<EffectEstimate>, String> {
        pairs.iter().map(|&p| f(p).map_err(|e| e.to_string())).collect()
    };

    let mut results = Vec::with_capacity(methods.len());
    for &method in methods {
        let estimates = match method {
            Method::Crude => each(&|p| estimate_crude(data, p)),
            Method::Stan => shared(&outcome).and_then(|(_, mu)| {
                let variances = if settings.bootstrap == 0 {
                    vec![f64::NAN; pairs.len()]
                } else {
                    bootstrap_stan_variances(
                        data,
                        &settings.outcome,
                        pairs,
                        settings.bootstrap,
                        derive_seed(settings.seed, 0, Purpose::Bootstrap),
                    )
                    .map_err(|e| format!("bootstrap: {e}"))?
                };
                Ok(pairs
                    .iter()
                    .zip(variances)
                    .map(|(&p, v)| EffectEstimate::new(Method::Stan, p, stan_point(mu, p), v, data.n()))
                    .collect())
            }),
            Method::Ipw => shared(&propensity).and_then(|(prop, _)| each(&|p| estimate_ipw(data, prop, p))),
            Method::Ow => shared(&propensity).and_then(|(_, ow)| each(&|p| estimate_ow(data, ow, p))),
            Method::Aow => {
                let prop = shared(&propensity);
                let out = shared(&outcome);
                prop.and_then(|(_, ow)| out.and_then(|(_, mu)| each(&|p| estimate_aow_with(data, ow, mu, p))))
            }
            Method::Tmle => {
                let prop = shared(&propensity);
                let out = shared(&outcome);
                prop.and_then(|(prop, _)| {
                    out.and_then(|(_, mu)| each(&|p| estimate_tmle_with(data, mu, &prop.probs, p, settings.tmle_bounds)))
                })
            }
            Method::Match => shared(&matches).and_then(|ms| each(&|p| estimate_match(data, ms, p))),
            Method::Bcm => {
                let ms = shared(&matches);
                let out = shared(&outcome);
                ms.and_then(|ms| out.and_then(|(_, mu)| each(&|p| estimate_bcm_with(data, ms, mu, p))))
            }
        };
        results.push(MethodResult {
            method,
            estimates: estimates.and_then(finite),
        });
    }

    Ok(Analysis {
        results,
        outcome: outcome.and_then(|r| r.ok()).map(|(f, _)| f),
        propensity: propensity.as_ref().and_then(|r| r.as_ref().ok()).map(|(p, _)| p.clone()),
        overlap: propensity.and_then(|r| r.ok()).map(|(_, ow)| ow),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::ContrastSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomized(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let t: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let y = (0..n).map(|i| x[(i, 0)] + [0.0, 1.0, 1.5][t[i]] + rng.random::<f64>() - 0.5).collect();
        Dataset::new(vec!["A".into(), "B".into()], x, t, 3, y).unwrap()
    }

    #[test]
    fn every_method_runs_on_every_pair() {
        let ds = randomized(300, 1);
        let pairs = ContrastSet::all_pairs(3).pairs().to_vec();
        let mut s = AnalysisSettings::new(Regime::MainTerms);
        s.bootstrap = 20;
        let a = analyze(&ds, &Method::ALL, &pairs, &s).unwrap();
        assert_eq!(a.results.len(), 8);
        for r in &a.results {
            let est = r.estimates.as_ref().unwrap();
            assert_eq!(est.len(), 3);
            assert!((est[0].tau_hat - 1.0).abs() < 0.3, "{:?}", est[0]);
            assert_eq!(est[0].estimand, r.method.estimand());
        }
        assert!(a.propensity.is_some() && a.outcome.is_some());
    }

    #[test]
    fn failures_are_confined_to_dependent_methods() {
        let ds = randomized(60, 2);
        let pairs = [Pair::new(1, 0).unwrap()];
        let mut s = AnalysisSettings::new(Regime::MainTerms);
        s.m = 1000;
        s.bootstrap = 0;
        let a = analyze(&ds, &[Method::Crude, Method::Stan, Method::Match, Method::Bcm], &pairs, &s).unwrap();
        assert!(a.results[0].estimates.is_ok());
        let stan = a.results[1].estimates.as_ref().unwrap();
        assert!(stan[0].variance.is_nan());
        assert!(a.results[2].estimates.is_err());
        assert!(a.results[3].estimates.is_err());
    }

    #[test]
    fn correct_regime_without_truth_fails_softly() {
        let ds = randomized(60, 3);
        let a = analyze(&ds, &[Method::Ipw, Method::Crude], &[Pair::new(2, 0).unwrap()], &AnalysisSettings::new(Regime::Correct)).unwrap();
        assert!(a.results[0].estimates.as_ref().unwrap_err().contains("treatment model"));
        assert!(a.results[1].estimates.is_ok());
    }
}
