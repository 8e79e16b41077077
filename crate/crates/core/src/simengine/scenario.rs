use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::Estimand;
use crate::learners::{Regime, DEFAULT_FOLDS};
use crate::matching::Metric;
use crate::outcome_methods::DEFAULT_BOOTSTRAP;
use crate::rng::{substream, Purpose};
use crate::tabular::{Dataset, DesignSpec, Pair, Term};

pub const COLUMNS: [&str; 3] = ["X1", "X2", "X3"];

/// Treatment-model coefficients `(b_l1, .., b_l5)` of `X1, X2, X3, X1 X3, X1^2`
/// for levels 2 and 3 under weak (`T-`) confounding.
pub const BETA_T_WEAK: [[f64; 5]; 2] = [[-0.2, 0.2, 0.2, 0.1, 0.1], [0.2, 0.1, -0.2, 0.1, 0.1]];
pub const BETA_T_STRONG: [[f64; 5]; 2] = [[-0.8, 0.8, 0.8, 0.2, 0.2], [0.5, 0.5, -0.8, 0.2, 0.2]];
/// Outcome-model coefficients of `1, X1, X2, X3, X2 X3, X2^2`.
pub const GAMMA_Y_WEAK: [f64; 6] = [0.0, 0.2, 0.2, 0.2, 0.1, 0.1];
pub const GAMMA_Y_STRONG: [f64; 6] = [0.0, 0.5, 0.5, 0.5, 0.2, 0.2];
/// Effects of levels 2 and 3 relative to level 1.
pub const LAMBDA: [f64; 2] = [1.0, 1.5];

/// The four named scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "t-y-")]
    WeakWeak,
    #[serde(rename = "t+y-")]
    StrongWeak,
    #[serde(rename = "t-y+")]
    WeakStrong,
    #[serde(rename = "t+y+")]
    StrongStrong,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::WeakWeak, Scenario::StrongWeak, Scenario::WeakStrong, Scenario::StrongStrong];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::WeakWeak => "t-y-",
            Scenario::StrongWeak => "t+y-",
            Scenario::WeakStrong => "t-y+",
            Scenario::StrongStrong => "t+y+",
        }
    }

    fn strong_treatment(&self) -> bool {
        matches!(self, Scenario::StrongWeak | Scenario::StrongStrong)
    }

    fn strong_outcome(&self) -> bool {
        matches!(self, Scenario::WeakStrong | Scenario::StrongStrong)
    }

    pub fn beta(&self) -> [[f64; 5]; 2] {
        if self.strong_treatment() {
            BETA_T_STRONG
        } else {
            BETA_T_WEAK
        }
    }

    pub fn gamma(&self) -> [f64; 6] {
        if self.strong_outcome() {
            GAMMA_Y_STRONG
        } else {
            GAMMA_Y_WEAK
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', ' '], "");
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == key || sc.name().replace('-', "minus").replace('+', "plus") == key)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}` (expected t-y-, t+y-, t-y+ or t+y+)")))
    }
}

/// Outcome design the data were generated from (with treatment dummies).
pub fn true_outcome_spec() -> DesignSpec {
    DesignSpec::new(
        vec![
            Term::Intercept,
            Term::main("X1"),
            Term::main("X2"),
            Term::main("X3"),
            Term::interaction("X2", "X3"),
            Term::square("X2"),
        ],
        true,
    )
}

/// Treatment design the data were generated from.
pub fn true_treatment_spec() -> DesignSpec {
    DesignSpec::new(
        vec![
            Term::Intercept,
            Term::main("X1"),
            Term::main("X2"),
            Term::main("X3"),
            Term::interaction("X1", "X3"),
            Term::square("X1"),
        ],
        false,
    )
}

/// A Monte Carlo scenario and how its estimators are implemented.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    /// Rows: levels 2 and 3.
    pub beta: [[f64; 5]; 2],
    pub gamma: [f64; 6],
    pub lambda: [f64; 2],
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub outcome_regime: Regime,
    pub treatment_regime: Regime,
    /// Outcome design used by the correct regime.
    pub outcome_spec: DesignSpec,
    /// Treatment design used by the correct regime.
    pub treatment_spec: DesignSpec,
    pub bootstrap: usize,
    pub m: usize,
    pub metric: Metric,
    pub folds: usize,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize, reps: usize, seed: u64, regime: Regime) -> ScenarioConfig {
        ScenarioConfig {
            name: scenario.name().into(),
            beta: scenario.beta(),
            gamma: scenario.gamma(),
            lambda: LAMBDA,
            n,
            reps,
            seed,
            outcome_regime: regime,
            treatment_regime: regime,
            outcome_spec: true_outcome_spec(),
            treatment_spec: true_treatment_spec(),
            bootstrap: DEFAULT_BOOTSTRAP,
            m: 1,
            metric: crate::matching::DEFAULT_METRIC,
            folds: DEFAULT_FOLDS,
        }
    }

    /// Label of the implementation: the regime, or both when they differ.
    pub fn regime_label(&self) -> String {
        let custom_outcome = self.outcome_regime == Regime::Correct && self.outcome_spec != true_outcome_spec();
        let custom_treatment =
            self.treatment_regime == Regime::Correct && self.treatment_spec != true_treatment_spec();
        if self.outcome_regime == self.treatment_regime && !custom_outcome && !custom_treatment {
            return self.outcome_regime.to_string();
        }
        let describe = |r: Regime, custom: bool| if custom { "custom".to_string() } else { r.to_string() };
        format!(
            "outcome={};treatment={}",
            describe(self.outcome_regime, custom_outcome),
            describe(self.treatment_regime, custom_treatment)
        )
    }

    /// Linear predictors of levels 2 and 3 for one covariate row.
    fn logits(&self, x1: f64, x2: f64, x3: f64) -> [f64; 2] {
        let f = [x1, x2, x3, x1 * x3, x1 * x1];
        let dot = |b: &[f64; 5]| b.iter().zip(&f).map(|(b, f)| b * f).sum::<f64>();
        [dot(&self.beta[0]), dot(&self.beta[1])]
    }

    /// True `P(T = t | X)` for every row of `x` (columns X1, X2, X3).
    pub fn true_probs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), 3);
        for i in 0..x.nrows() {
            let p = self.row_probs(x[(i, 0)], x[(i, 1)], x[(i, 2)]);
            for l in 0..3 {
                out[(i, l)] = p[l];
            }
        }
        out
    }

    fn row_probs(&self, x1: f64, x2: f64, x3: f64) -> [f64; 3] {
        let [e2, e3] = self.logits(x1, x2, x3);
        let m = e2.max(e3).max(0.0);
        let (a, b, c) = ((-m).exp(), (e2 - m).exp(), (e3 - m).exp());
        let s = a + b + c;
        [a / s, b / s, c / s]
    }

    /// `E(Y | T = t, X)` without the treatment effect.
    fn baseline(&self, x1: f64, x2: f64, x3: f64) -> f64 {
        let g = &self.gamma;
        g[0] + g[1] * x1 + g[2] * x2 + g[3] * x3 + g[4] * x2 * x3 + g[5] * x2 * x2
    }

    /// `E(Y | T = t, X)` for every row and level.
    pub fn true_means(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let shift = [0.0, self.lambda[0], self.lambda[1]];
        DMatrix::from_fn(x.nrows(), 3, |i, l| self.baseline(x[(i, 0)], x[(i, 1)], x[(i, 2)]) + shift[l])
    }

    /// The closed-form effect of `pair`: treatment enters the outcome
    /// additively, so both estimands equal the difference of effects.
    pub fn true_effect(&self, pair: Pair, _estimand: Estimand) -> f64 {
        let shift = [0.0, self.lambda[0], self.lambda[1]];
        shift[pair.treated] - shift[pair.reference]
    }
}

fn draw_covariates<R: Rng>(rng: &mut R) -> [f64; 3] {
    let x1: f64 = rng.sample(StandardNormal);
    let e: f64 = rng.sample(StandardNormal);
    let x3 = f64::from(u8::from(rng.random::<f64>() < 0.4));
    [x1, 2.0 * x1 + e, x3]
}

fn draw_level<R: Rng>(rng: &mut R, p: &[f64; 3]) -> usize {
    let u: f64 = rng.random();
    if u < p[0] {
        0
    } else if u < p[0] + p[1] {
        1
    } else {
        2
    }
}

/// Replication `rep` of the scenario. Fails only if a treatment level is
/// empty (tiny `n`).
pub fn simulate_dataset(cfg: &ScenarioConfig, rep: usize) -> Result<Dataset> {
    simulate_n(cfg, cfg.n, cfg.seed, rep as u64)
}

fn simulate_n(cfg: &ScenarioConfig, n: usize, seed: u64, index: u64) -> Result<Dataset> {
    let mut rng = substream(seed, index, Purpose::Data);
    let shift = [0.0, cfg.lambda[0], cfg.lambda[1]];
    let mut x = DMatrix::zeros(n, 3);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let [x1, x2, x3] = draw_covariates(&mut rng);
        x[(i, 0)] = x1;
        x[(i, 1)] = x2;
        x[(i, 2)] = x3;
        let level = draw_level(&mut rng, &cfg.row_probs(x1, x2, x3));
        let noise: f64 = StandardNormal.sample(&mut rng);
        t.push(level);
        y.push(cfg.baseline(x1, x2, x3) + shift[level] + noise);
    }
    Dataset::new(COLUMNS.iter().map(|c| c.to_string()).collect(), x, t, 3, y)
}

/// Weight attached to each counterfactual draw.
pub enum TruthWeight<'a> {
    /// Every draw counts equally (population estimand).
    Uniform,
    /// `h(X)` from the true treatment probabilities (overlap estimand).
    TrueOverlap,
    /// `h(X)` from some other probability model, evaluated on a chunk of
    /// covariate rows.
    Probabilities(&'a (dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + Sync)),
}

/// Monte Carlo truth: draws `draws` covariate rows, both potential
/// outcomes with independent noise, and averages their difference with the
/// requested weights.
pub fn counterfactual_truth(cfg: &ScenarioConfig, pair: Pair, draws: usize, seed: u64, weight: TruthWeight<'_>) -> f64 {
    const CHUNK: usize = 100_000;
    let shift = [0.0, cfg.lambda[0], cfg.lambda[1]];
    let mut num = 0.0;
    let mut den = 0.0;
    let mut done = 0;
    let mut chunk_index = 0u64;
    while done < draws {
        let size = CHUNK.min(draws - done);
        let mut rng = substream(seed, chunk_index, Purpose::Truth);
        let mut x = DMatrix::zeros(size, 3);
        let mut contrast = Vec::with_capacity(size);
        for i in 0..size {
            let [x1, x2, x3] = draw_covariates(&mut rng);
            x[(i, 0)] = x1;
            x[(i, 1)] = x2;
            x[(i, 2)] = x3;
            let base = cfg.baseline(x1, x2, x3);
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e0: f64 = StandardNormal.sample(&mut rng);
            contrast.push((base + shift[pair.treated] + e1) - (base + shift[pair.reference] + e0));
        }
        let probs = match &weight {
            TruthWeight::Uniform => None,
            TruthWeight::TrueOverlap => Some(cfg.true_probs(&x)),
            TruthWeight::Probabilities(f) => Some(f(&x)),
        };
        for (i, c) in contrast.iter().enumerate() {
            let h = match &probs {
                None => 1.0,
                Some(p) => 1.0 / p.row(i).iter().map(|v| 1.0 / v).sum::<f64>(),
            };
            num += h * c;
            den += h;
        }
        done += size;
        chunk_index += 1;
    }
    num / den
}

/// A large sample from the scenario, for fitting limits of working models.
pub fn simulate_large(cfg: &ScenarioConfig, n: usize, seed: u64) -> Result<Dataset> {
    simulate_n(cfg, n, seed, u64::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm;

    fn cfg(s: Scenario) -> ScenarioConfig {
        ScenarioConfig::new(s, 1000, 10, 1, Regime::Correct)
    }

    #[test]
    fn constants_match_the_design() {
        assert_eq!(cfg(Scenario::WeakWeak).beta, [[-0.2, 0.2, 0.2, 0.1, 0.1], [0.2, 0.1, -0.2, 0.1, 0.1]]);
        assert_eq!(cfg(Scenario::StrongStrong).beta, [[-0.8, 0.8, 0.8, 0.2, 0.2], [0.5, 0.5, -0.8, 0.2, 0.2]]);
        assert_eq!(cfg(Scenario::WeakWeak).gamma, [0.0, 0.2, 0.2, 0.2, 0.1, 0.1]);
        assert_eq!(cfg(Scenario::StrongStrong).gamma, [0.0, 0.5, 0.5, 0.5, 0.2, 0.2]);
        assert_eq!(cfg(Scenario::StrongWeak).gamma, GAMMA_Y_WEAK);
        assert_eq!(cfg(Scenario::WeakStrong).beta, BETA_T_WEAK);
        for s in Scenario::ALL {
            assert_eq!(cfg(s).lambda, [1.0, 1.5]);
            assert_eq!(Scenario::from_str(s.name()).unwrap(), s);
        }
        assert!(Scenario::from_str("t*y-").is_err());
    }

    #[test]
    fn null_treatment_model_is_uniform() {
        let mut c = cfg(Scenario::StrongStrong);
        c.beta = [[0.0; 5]; 2];
        let ds = simulate_dataset(&c, 0).unwrap();
        let p = c.true_probs(ds.x());
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn group_means_without_confounding() {
        let mut c = cfg(Scenario::WeakWeak);
        c.gamma = [0.0; 6];
        c.n = 100_000;
        let ds = simulate_dataset(&c, 0).unwrap();
        for (level, want) in [0.0, 1.0, 1.5].iter().enumerate() {
            let ys: Vec<f64> = (0..ds.n()).filter(|&i| ds.t()[i] == level).map(|i| ds.y()[i]).collect();
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            assert!((mean - want).abs() < 0.02, "level {level}: {mean}");
        }
    }

    #[test]
    fn strong_treatment_has_poor_overlap() {
        let mut c = cfg(Scenario::StrongStrong);
        c.n = 100_000;
        let ds = simulate_dataset(&c, 0).unwrap();
        let p = c.true_probs(ds.x());
        assert!(p.min() < 0.01);
        let mut w = cfg(Scenario::WeakWeak);
        w.n = 100_000;
        let dw = simulate_dataset(&w, 0).unwrap();
        assert!(w.true_probs(dw.x()).min() > p.min());
    }

    #[test]
    fn replications_are_reproducible_and_distinct() {
        let c = cfg(Scenario::WeakWeak);
        let a = simulate_dataset(&c, 3).unwrap();
        assert_eq!(a.y(), simulate_dataset(&c, 3).unwrap().y());
        assert_ne!(a.y(), simulate_dataset(&c, 4).unwrap().y());
    }

    #[test]
    fn closed_form_truths() {
        let c = cfg(Scenario::StrongWeak);
        let p21 = Pair::new(1, 0).unwrap();
        let p31 = Pair::new(2, 0).unwrap();
        assert_eq!(c.true_effect(p21, Estimand::Population), 1.0);
        assert_eq!(c.true_effect(p31, Estimand::Overlap), 1.5);
        let mut z = c.clone();
        z.lambda = [0.0, 0.0];
        assert_eq!(z.true_effect(p31, Estimand::Population), 0.0);
    }

    #[test]
    fn counterfactual_oracle_agrees_with_closed_form() {
        let c = cfg(Scenario::StrongStrong);
        for (pair, want) in [(Pair::new(1, 0).unwrap(), 1.0), (Pair::new(2, 0).unwrap(), 1.5)] {
            let pop = counterfactual_truth(&c, pair, 1_000_000, 9, TruthWeight::Uniform);
            let ov = counterfactual_truth(&c, pair, 1_000_000, 9, TruthWeight::TrueOverlap);
            assert!((pop - want).abs() < 0.005, "{pop}");
            assert!((ov - want).abs() < 0.005, "{ov}");
        }
    }

    #[test]
    fn correct_outcome_spec_recovers_gamma() {
        let mut c = cfg(Scenario::WeakWeak);
        c.n = 50_000;
        let ds = simulate_dataset(&c, 0).unwrap();
        let design = crate::tabular::expand_design(&ds, &true_outcome_spec()).unwrap();
        let fit = glm::fit_ols(&design, ds.y()).unwrap();
        for (j, g) in GAMMA_Y_WEAK.iter().enumerate() {
            assert!((fit.coefficients[j] - g).abs() < 0.05, "gamma{j}: {}", fit.coefficients[j]);
        }
        assert!((fit.coefficients[6] - 1.0).abs() < 0.05);
        assert!((fit.coefficients[7] - 1.5).abs() < 0.05);
    }

    #[test]
    fn multinomial_recovers_beta() {
        let mut c = cfg(Scenario::WeakWeak);
        c.n = 200_000;
        let ds = simulate_dataset(&c, 1).unwrap();
        let design = crate::tabular::expand_design(&ds, &true_treatment_spec()).unwrap();
        let fit = glm::fit_multinomial(&design, ds.t(), 3).unwrap();
        for l in 0..2 {
            assert!(fit.coefficients[(l, 0)].abs() < 0.05);
            for j in 0..5 {
                let b = fit.coefficients[(l, j + 1)];
                assert!((b - BETA_T_WEAK[l][j]).abs() < 0.05, "beta{}{}: {b}", l + 2, j + 1);
            }
        }
    }
}
