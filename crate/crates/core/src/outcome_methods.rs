//! Standardization with bootstrap variance, and targeted maximum
//! likelihood estimation with influence-function variance.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimate::{EffectEstimate, Method};
use crate::glm::{self, expit, logit};
use crate::learners::{OutcomeFit, OutcomeLearner, PropensityFit};
use crate::rng::{derive_seed, substream, Purpose};
use crate::tabular::{Dataset, OutcomeKind, Pair};

/// Default number of bootstrap resamples for standardization.
pub const DEFAULT_BOOTSTRAP: usize = 200;

/// Redraws allowed when a resample misses a treatment level.
pub const MAX_REDRAWS: usize = 10;

/// Working-scale clipping of initial predictions before the logit.
pub const Q0_BOUND: f64 = 1e-4;

/// Plug-in contrast `mean_i [mu(i, t) - mu(i, t')]`.
pub fn stan_point(mu: &DMatrix<f64>, pair: Pair) -> f64 {
    let n = mu.nrows();
    (0..n).map(|i| mu[(i, pair.treated)] - mu[(i, pair.reference)]).sum::<f64>() / n as f64
}

/// Row indices of bootstrap resample `b`, redrawn while a level is missing.
pub fn bootstrap_indices(data: &Dataset, seed: u64, b: usize) -> Result<Vec<usize>> {
    let n = data.n();
    let mut rng = substream(seed, b as u64, Purpose::Bootstrap);
    for _ in 0..=MAX_REDRAWS {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut seen = vec![false; data.k()];
        for &i in &idx {
            seen[data.t()[i]] = true;
        }
        if seen.iter().all(|&s| s) {
            return Ok(idx);
        }
    }
    Err(Error::Bootstrap(format!(
        "resample {b} missed a treatment level {} times in a row",
        MAX_REDRAWS + 1
    )))
}

/// Bootstrap variances of the standardization estimate of each pair; the
/// learner is refitted on every resample.
pub fn bootstrap_stan_variances(
    data: &Dataset,
    learner: &OutcomeLearner,
    pairs: &[Pair],
    reps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if reps < 2 {
        return Err(Error::Bootstrap(format!("{reps} resamples; at least 2 are needed")));
    }
    let draws: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let idx = bootstrap_indices(data, seed, b)?;
            let boot = data.subset(&idx)?;
            let fit = learner.clone().with_seed(derive_seed(seed, b as u64, Purpose::Folds)).fit(&boot)?;
            let mu = fit.predict_all(boot.x());
            Ok(pairs.iter().map(|&p| stan_point(&mu, p)).collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..pairs.len())
        .map(|j| {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / reps as f64;
            draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / (reps - 1) as f64
        })
        .collect())
}

/// Standardization: plug-in contrast of `out`, bootstrap variance from
/// refitting `learner` on `bootstrap_reps` resamples.
pub fn estimate_stan(
    data: &Dataset,
    out: &OutcomeFit,
    learner: &OutcomeLearner,
    pair: Pair,
    bootstrap_reps: usize,
    seed: u64,
) -> Result<EffectEstimate> {
    pair.check(data.k())?;
    let tau = stan_point(&out.predict_all(data.x()), pair);
    let var = bootstrap_stan_variances(data, learner, &[pair], bootstrap_reps, seed)?[0];
    Ok(EffectEstimate::new(Method::Stan, pair, tau, var, data.n()))
}

/// One targeting step for treatment level `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct TmleFluctuation {
    pub level: usize,
    pub epsilon: f64,
    /// Initial predictions on the working (0, 1) scale, after clipping.
    pub q0: Vec<f64>,
    /// Updated predictions on the working scale.
    pub q1: Vec<f64>,
    /// `(a, b)`: the working scale is `(Y - a) / (b - a)`.
    pub scale: (f64, f64),
    /// `I(T_i = level) / P(T = level | X_i)`.
    pub weights: Vec<f64>,
}

impl TmleFluctuation {
    /// Updated predictions on the outcome scale.
    pub fn q1_outcome_scale(&self) -> Vec<f64> {
        let (a, b) = self.scale;
        self.q1.iter().map(|q| a + (b - a) * q).collect()
    }

    /// `sum_i w_i (Y*_i - Q1_i)`, zero at the fitted epsilon.
    pub fn score(&self, ystar: &[f64]) -> f64 {
        self.weights.iter().zip(ystar).zip(&self.q1).map(|((w, y), q)| w * (y - q)).sum()
    }
}

/// Outcome bounds `(a, b)` for the working scale: `(0, 1)` for binary
/// outcomes, the observed range otherwise.
pub fn outcome_bounds(data: &Dataset) -> Result<(f64, f64)> {
    if data.outcome_kind() == OutcomeKind::Binary {
        return Ok((0.0, 1.0));
    }
    let lo = data.y().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.y().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateGroup("outcome is constant; TMLE bounds collapse".into()));
    }
    Ok((lo, hi))
}

pub fn working_outcome(y: &[f64], scale: (f64, f64)) -> Vec<f64> {
    let (a, b) = scale;
    y.iter().map(|v| ((v - a) / (b - a)).clamp(0.0, 1.0)).collect()
}

/// Fits the intercept-only weighted logistic fluctuation with offset
/// `logit(Q0)` for one level.
pub fn tmle_fluctuate(
    data: &Dataset,
    mu: &DMatrix<f64>,
    probs: &DMatrix<f64>,
    level: usize,
    scale: (f64, f64),
) -> Result<TmleFluctuation> {
    let n = data.n();
    let (a, b) = scale;
    if !(b > a) {
        return Err(Error::Config(format!("TMLE bounds ({a}, {b}) are empty")));
    }
    let ystar = working_outcome(data.y(), scale);
    let q0: Vec<f64> = (0..n)
        .map(|i| ((mu[(i, level)] - a) / (b - a)).clamp(Q0_BOUND, 1.0 - Q0_BOUND))
        .collect();
    let weights: Vec<f64> = (0..n)
        .map(|i| if data.t()[i] == level { 1.0 / probs[(i, level)] } else { 0.0 })
        .collect();
    let offset: Vec<f64> = q0.iter().map(|&q| logit(q)).collect();
    let ones = DMatrix::from_element(n, 1, 1.0);
    let fit = glm::fit_logistic(&ones, &ystar, Some(&weights), Some(&offset))?;
    let epsilon = fit.coefficients[0];
    if !epsilon.is_finite() {
        return Err(Error::InvalidData(format!("TMLE fluctuation for level {} diverged", level + 1)));
    }
    let q1 = offset.iter().map(|o| expit(o + epsilon)).collect();
    Ok(TmleFluctuation {
        level,
        epsilon,
        q0,
        q1,
        scale,
        weights,
    })
}

/// TMLE from outcome predictions `mu` (n x k) and propensities `probs`,
/// with optional outcome bounds.
pub fn estimate_tmle_with(
    data: &Dataset,
    mu: &DMatrix<f64>,
    probs: &DMatrix<f64>,
    pair: Pair,
    bounds: Option<(f64, f64)>,
) -> Result<EffectEstimate> {
    pair.check(data.k())?;
    let scale = match bounds {
        Some(s) => s,
        None => outcome_bounds(data)?,
    };
    let ft = tmle_fluctuate(data, mu, probs, pair.treated, scale)?;
    let fr = tmle_fluctuate(data, mu, probs, pair.reference, scale)?;
    let (qt, qr) = (ft.q1_outcome_scale(), fr.q1_outcome_scale());
    let n = data.n();
    let tau = (0..n).map(|i| qt[i] - qr[i]).sum::<f64>() / n as f64;

    let (a, b) = scale;
    let ystar = working_outcome(data.y(), scale);
    let d: Vec<f64> = (0..n)
        .map(|i| {
            (b - a) * (ft.weights[i] * (ystar[i] - ft.q1[i]) - fr.weights[i] * (ystar[i] - fr.q1[i])) + qt[i]
                - qr[i]
                - tau
        })
        .collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64;
    Ok(EffectEstimate::new(Method::Tmle, pair, tau, var, n))
}

pub fn estimate_tmle(data: &Dataset, out: &OutcomeFit, prop: &PropensityFit, pair: Pair) -> Result<EffectEstimate> {
    estimate_tmle_with(data, &out.predict_all(data.x()), &prop.probs, pair, None)
}
