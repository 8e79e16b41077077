//! Outcome and treatment models under the three implementation regimes:
//! correctly specified parametric, main-terms parametric, and machine
//! learning (super learner for the outcome, adaptive spline multinomial
//! regression for the treatment).

mod nnls;
mod polyclass;
mod super_learner;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{self, expit, LinearFit, LogisticFit, MultinomialFit};
use crate::tabular::{Dataset, Design, DesignSpec, OutcomeKind, Term, TreatmentCoding};

pub use nnls::nnls;
pub use polyclass::{fit_polyclass, PolyclassFit};
pub use super_learner::{fit_super_learner, fold_assignment, SuperLearnerFit};

/// Default number of cross-validation folds.
pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Correct,
    #[serde(rename = "mainterms")]
    MainTerms,
    Ml,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Correct => "correct",
            Regime::MainTerms => "mainterms",
            Regime::Ml => "ml",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "correct" => Ok(Regime::Correct),
            "mainterms" | "main-terms" | "main" => Ok(Regime::MainTerms),
            "ml" => Ok(Regime::Ml),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

/// Conditional mean of the outcome under each treatment level.
pub trait OutcomeModel: Send + Sync + fmt::Debug {
    /// n x k matrix of `E(Y | T = t, X_i)`.
    fn predict_all(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

/// Treatment-assignment probabilities.
pub trait TreatmentModel: Send + Sync + fmt::Debug {
    /// n x k matrix of `P(T = t | X_i)`, rows summing to one.
    fn probs(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone)]
pub struct OutcomeFit {
    model: Arc<dyn OutcomeModel>,
    pub regime: Option<Regime>,
    pub description: String,
}

impl OutcomeFit {
    pub fn from_model(model: Arc<dyn OutcomeModel>, description: impl Into<String>) -> OutcomeFit {
        OutcomeFit {
            model,
            regime: None,
            description: description.into(),
        }
    }

    pub fn predict_all(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.model.predict_all(x)
    }

    pub fn predict(&self, level: usize, row: &[f64]) -> f64 {
        let x = DMatrix::from_row_slice(1, row.len(), row);
        self.model.predict_all(&x)[(0, level)]
    }

    pub fn model(&self) -> &Arc<dyn OutcomeModel> {
        &self.model
    }
}

#[derive(Debug, Clone)]
pub struct PropensityFit {
    /// Fitted probabilities on the training rows.
    pub probs: DMatrix<f64>,
    model: Arc<dyn TreatmentModel>,
    pub regime: Option<Regime>,
    pub description: String,
}

impl PropensityFit {
    /// Evaluates `model` on `x` to fill the training probabilities.
    pub fn from_model(
        model: Arc<dyn TreatmentModel>,
        x: &DMatrix<f64>,
        description: impl Into<String>,
    ) -> PropensityFit {
        PropensityFit {
            probs: model.probs(x),
            model,
            regime: None,
            description: description.into(),
        }
    }

    /// Fixed probabilities with no model behind them (rows of `probs`
    /// are returned for any covariate row count equal to theirs).
    pub fn from_probs(probs: DMatrix<f64>) -> PropensityFit {
        let model = Arc::new(FixedProbs(probs.clone()));
        PropensityFit {
            probs,
            model,
            regime: None,
            description: "fixed probabilities".into(),
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.model.probs(x)
    }

    pub fn predict_row(&self, row: &[f64]) -> Vec<f64> {
        let x = DMatrix::from_row_slice(1, row.len(), row);
        self.model.probs(&x).row(0).iter().copied().collect()
    }

    pub fn model(&self) -> &Arc<dyn TreatmentModel> {
        &self.model
    }
}

#[derive(Debug)]
struct FixedProbs(DMatrix<f64>);

impl TreatmentModel for FixedProbs {
    fn probs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.0.nrows(), "fixed probabilities cover the training rows only");
        self.0.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    pub fn for_outcome(kind: OutcomeKind) -> Link {
        match kind {
            OutcomeKind::Continuous => Link::Identity,
            OutcomeKind::Binary => Link::Logit,
        }
    }
}

/// A GLM outcome learner: a design with treatment dummies and a link.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmLearner {
    pub name: String,
    pub spec: DesignSpec,
    pub link: Link,
}

impl GlmLearner {
    pub fn new(name: impl Into<String>, mut spec: DesignSpec, link: Link) -> GlmLearner {
        spec.treatment_dummies = true;
        GlmLearner {
            name: name.into(),
            spec,
            link,
        }
    }

    pub fn fit(&self, data: &Dataset) -> Result<GlmOutcome> {
        let design = self.spec.resolve(data)?;
        let x = design.matrix(data.x(), TreatmentCoding::Observed(data.t()));
        let fit = match self.link {
            Link::Identity => GlmCoefficients::Linear(glm::fit_ols(&x, data.y())?),
            Link::Logit => GlmCoefficients::Logistic(glm::fit_logistic(&x, data.y(), None, None)?),
        };
        Ok(GlmOutcome {
            design,
            fit,
            k: data.k(),
        })
    }
}

#[derive(Debug, Clone)]
enum GlmCoefficients {
    Linear(LinearFit),
    Logistic(LogisticFit),
}

/// A fitted GLM outcome model.
#[derive(Debug, Clone)]
pub struct GlmOutcome {
    design: Design,
    fit: GlmCoefficients,
    k: usize,
}

impl GlmOutcome {
    /// Prediction under the observed treatment of each row.
    pub fn predict_observed(&self, x: &DMatrix<f64>, t: &[usize]) -> Vec<f64> {
        self.predict_with(x, TreatmentCoding::Observed(t))
    }

    fn predict_with(&self, x: &DMatrix<f64>, coding: TreatmentCoding<'_>) -> Vec<f64> {
        let m = self.design.matrix(x, coding);
        match &self.fit {
            GlmCoefficients::Linear(f) => f.predict(&m).iter().copied().collect(),
            GlmCoefficients::Logistic(f) => f.predict(&m, None).iter().copied().collect(),
        }
    }

    pub fn coefficients(&self) -> &nalgebra::DVector<f64> {
        match &self.fit {
            GlmCoefficients::Linear(f) => &f.coefficients,
            GlmCoefficients::Logistic(f) => &f.coefficients,
        }
    }
}

impl OutcomeModel for GlmOutcome {
    fn predict_all(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), self.k);
        for level in 0..self.k {
            let col = self.predict_with(x, TreatmentCoding::Fixed(level));
            out.column_mut(level).copy_from_slice(&col);
        }
        out
    }
}

/// Covariates with more than `min_distinct` distinct values that are not
/// 0/1 indicators.
fn continuous_columns(data: &Dataset, min_distinct: usize) -> Vec<usize> {
    let binary = data.binary_columns();
    (0..data.p())
        .filter(|j| !binary.contains(j))
        .filter(|&j| {
            let mut v: Vec<f64> = data.x().column(j).iter().copied().collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.len() > min_distinct
        })
        .collect()
}

/// Interior knots used by every spline basis built here.
pub const SPLINE_KNOTS: usize = 3;

/// The three super-learner candidates: main terms; main terms with all
/// pairwise interactions and squares; additive cubic splines.
pub fn default_candidates(data: &Dataset) -> Vec<GlmLearner> {
    let link = Link::for_outcome(data.outcome_kind());
    let cols = data.columns();
    let binary = data.binary_columns();
    let splined = continuous_columns(data, SPLINE_KNOTS + 4);

    let main = DesignSpec::main_terms(cols, true);

    let mut quad = DesignSpec::main_terms(cols, true);
    for a in 0..cols.len() {
        for b in (a + 1)..cols.len() {
            quad.terms.push(Term::interaction(&cols[a], &cols[b]));
        }
    }
    for (j, c) in cols.iter().enumerate() {
        if !binary.contains(&j) {
            quad.terms.push(Term::square(c));
        }
    }

    let mut additive = DesignSpec::new(vec![Term::Intercept], true);
    for (j, c) in cols.iter().enumerate() {
        additive.terms.push(if splined.contains(&j) {
            Term::spline(c, SPLINE_KNOTS)
        } else {
            Term::main(c)
        });
    }

    vec![
        GlmLearner::new("main", main, link),
        GlmLearner::new("interactions+squares", quad, link),
        GlmLearner::new("additive-splines", additive, link),
    ]
}

/// Fits outcome models for one regime; re-usable across resamples.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeLearner {
    pub regime: Regime,
    pub truth: Option<DesignSpec>,
    pub folds: usize,
    pub seed: u64,
}

impl OutcomeLearner {
    pub fn new(regime: Regime, truth: Option<DesignSpec>) -> OutcomeLearner {
        OutcomeLearner {
            regime,
            truth,
            folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> OutcomeLearner {
        self.seed = seed;
        self
    }

    pub fn fit(&self, data: &Dataset) -> Result<OutcomeFit> {
        let link = Link::for_outcome(data.outcome_kind());
        let (model, description): (Arc<dyn OutcomeModel>, String) = match self.regime {
            Regime::Correct => {
                let spec = self.truth.clone().ok_or_else(|| {
                    Error::Config("the correct regime needs the true outcome specification".into())
                })?;
                let learner = GlmLearner::new("correct", spec, link);
                (Arc::new(learner.fit(data)?), "correctly specified GLM".into())
            }
            Regime::MainTerms => {
                let learner = GlmLearner::new("main", DesignSpec::main_terms(data.columns(), true), link);
                (Arc::new(learner.fit(data)?), "main-terms GLM".into())
            }
            Regime::Ml => {
                let sl = fit_super_learner(data, &default_candidates(data), self.folds, self.seed)?;
                let desc = format!("super learner, weights {:?}", sl.weights.as_slice());
                (Arc::new(sl), desc)
            }
        };
        Ok(OutcomeFit {
            model,
            regime: Some(self.regime),
            description,
        })
    }
}

pub fn fit_outcome(data: &Dataset, regime: Regime, truth: Option<&DesignSpec>) -> Result<OutcomeFit> {
    OutcomeLearner::new(regime, truth.cloned()).fit(data)
}

#[derive(Debug, Clone)]
pub struct MultinomialModel {
    design: Design,
    fit: MultinomialFit,
}

impl MultinomialModel {
    pub fn fit(data: &Dataset, spec: &DesignSpec) -> Result<MultinomialModel> {
        let mut spec = spec.clone();
        spec.treatment_dummies = false;
        let design = spec.resolve(data)?;
        let x = design.matrix(data.x(), TreatmentCoding::Fixed(0));
        let fit = glm::fit_multinomial(&x, data.t(), data.k())?;
        Ok(MultinomialModel { design, fit })
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.fit.coefficients
    }

    pub fn converged(&self) -> bool {
        self.fit.converged
    }
}

impl TreatmentModel for MultinomialModel {
    fn probs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        glm::predict_probs(&self.fit, &self.design.matrix(x, TreatmentCoding::Fixed(0)))
    }
}

pub fn fit_propensity(data: &Dataset, regime: Regime, truth: Option<&DesignSpec>) -> Result<PropensityFit> {
    let (model, description): (Arc<dyn TreatmentModel>, String) = match regime {
        Regime::Correct => {
            let spec = truth.ok_or_else(|| {
                Error::Config("the correct regime needs the true treatment specification".into())
            })?;
            (Arc::new(MultinomialModel::fit(data, spec)?), "correctly specified multinomial".into())
        }
        Regime::MainTerms => (
            Arc::new(MultinomialModel::fit(data, &DesignSpec::main_terms(data.columns(), false))?),
            "main-terms multinomial".into(),
        ),
        Regime::Ml => {
            let fit = fit_polyclass(data)?;
            let desc = format!("adaptive spline multinomial, {} terms", fit.selected().len());
            (Arc::new(fit), desc)
        }
    };
    let mut fit = PropensityFit::from_model(model, data.x(), description);
    fit.regime = Some(regime);
    Ok(fit)
}

/// Fixed logistic outcome model `expit(b0 + sum b_j x_j + delta_t)`, for
/// simulation generators with a known closed form.
#[derive(Debug, Clone)]
pub struct LogisticOutcome {
    pub intercept: f64,
    pub slopes: Vec<f64>,
    pub level_effects: Vec<f64>,
}

impl OutcomeModel for LogisticOutcome {
    fn predict_all(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), self.level_effects.len(), |i, t| {
            let lin: f64 = self.slopes.iter().enumerate().map(|(j, b)| b * x[(i, j)]).sum();
            expit(self.intercept + lin + self.level_effects[t])
        })
    }
}

/// Same prediction for every level and row.
#[derive(Debug, Clone)]
pub struct ConstantOutcome {
    pub value: f64,
    pub k: usize,
}

impl OutcomeModel for ConstantOutcome {
    fn predict_all(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_element(x.nrows(), self.k, self.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("X{j}")).collect()
    }

    #[test]
    fn mainterms_recovers_exact_linear_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 300;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let t: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let y: Vec<f64> = t.iter().map(|&ti| 2.0 + ti as f64).collect();
        let ds = Dataset::new(names(2), x, t, 2, y).unwrap();
        let fit = fit_outcome(&ds, Regime::MainTerms, None).unwrap();
        let pred = fit.predict_all(ds.x());
        for i in 0..n {
            assert_abs_diff_eq!(pred[(i, 1)] - pred[(i, 0)], 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn correct_regime_requires_truth() {
        let x = DMatrix::from_fn(4, 1, |i, _| i as f64);
        let ds = Dataset::new(names(1), x, vec![0, 1, 0, 1], 2, vec![1.0, 2.0, 3.0, 4.5]).unwrap();
        assert!(matches!(fit_outcome(&ds, Regime::Correct, None), Err(Error::Config(_))));
        assert!(matches!(fit_propensity(&ds, Regime::Correct, None), Err(Error::Config(_))));
    }

    #[test]
    fn null_propensity_is_uniform_for_parametric_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = 5000;
        let x = DMatrix::from_fn(n, 3, |_, j| {
            if j == 2 {
                f64::from(u8::from(rng.random::<f64>() < 0.4))
            } else {
                normal.sample(&mut rng)
            }
        });
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let ds = Dataset::new(names(3), x, t, 3, vec![0.0; n]).unwrap();
        let truth = DesignSpec::main_terms(ds.columns(), false);
        for regime in [Regime::Correct, Regime::MainTerms, Regime::Ml] {
            let fit = fit_propensity(&ds, regime, Some(&truth)).unwrap();
            let mad = fit.probs.iter().map(|&p| (p - 1.0 / 3.0).abs()).sum::<f64>() / (3 * n) as f64;
            assert!(mad < 0.02, "{regime}: mean deviation {mad}");
            for i in 0..n {
                assert!((fit.probs.row(i).sum() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mainterms_propensity_on_noise_tracks_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 1000;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let t: Vec<usize> = (0..n).map(|i| if i < 500 { 0 } else if i < 800 { 1 } else { 2 }).collect();
        let ds = Dataset::new(names(2), x, t, 3, vec![0.0; n]).unwrap();
        let fit = fit_propensity(&ds, Regime::MainTerms, None).unwrap();
        // With an intercept the score equations force the mean fitted
        // probability of each level to its observed frequency.
        for (l, want) in [0.5, 0.3, 0.2].iter().enumerate() {
            assert_abs_diff_eq!(fit.probs.column(l).mean(), *want, epsilon = 1e-6);
            for i in 0..n {
                assert!((fit.probs[(i, l)] - want).abs() < 0.1);
            }
        }
    }

    #[test]
    fn binary_outcome_predictions_are_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let t: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| f64::from(u8::from(rng.random::<f64>() < expit(x[(i, 0)] + 0.3 * t[i] as f64))))
            .collect();
        let ds = Dataset::new(names(2), x, t, 3, y).unwrap();
        assert_eq!(ds.outcome_kind(), OutcomeKind::Binary);
        for regime in [Regime::MainTerms, Regime::Ml] {
            let pred = fit_outcome(&ds, regime, None).unwrap().predict_all(ds.x());
            assert!(pred.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn regime_parsing() {
        assert_eq!("ML".parse::<Regime>().unwrap(), Regime::Ml);
        assert_eq!("mainterms".parse::<Regime>().unwrap(), Regime::MainTerms);
        assert!("forest".parse::<Regime>().is_err());
    }
}
