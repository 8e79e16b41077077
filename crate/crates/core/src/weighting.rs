//! Inverse probability weighting, overlap weights and augmented overlap
//! weights, with influence-function variances that treat the weights as
//! known.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimate::{EffectEstimate, Method};
use crate::learners::{OutcomeFit, PropensityFit};
use crate::tabular::{Dataset, Pair};

/// Group weight sums below this are treated as empty.
const MIN_WEIGHT_SUM: f64 = 1e-12;

/// `h(X_i) = 1 / sum_l 1/P(T = l | X_i)` and `w_i = h(X_i) / P(T = t_i | X_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapWeights {
    pub h: Vec<f64>,
    pub w: Vec<f64>,
}

impl OverlapWeights {
    pub fn mean_h(&self) -> f64 {
        self.h.iter().sum::<f64>() / self.h.len() as f64
    }

    /// Same weights multiplied by `c`.
    pub fn scaled(&self, c: f64) -> OverlapWeights {
        OverlapWeights {
            h: self.h.iter().map(|v| v * c).collect(),
            w: self.w.iter().map(|v| v * c).collect(),
        }
    }
}

pub fn compute_overlap_weights(prop: &PropensityFit, t: &[usize]) -> OverlapWeights {
    overlap_weights(&prop.probs, t)
}

/// Overlap weights from an n x k probability matrix.
pub fn overlap_weights(probs: &DMatrix<f64>, t: &[usize]) -> OverlapWeights {
    assert_eq!(probs.nrows(), t.len());
    let h: Vec<f64> = probs
        .row_iter()
        .map(|row| 1.0 / row.iter().map(|p| 1.0 / p).sum::<f64>())
        .collect();
    let w = h.iter().zip(t).enumerate().map(|(i, (h, &ti))| h / probs[(i, ti)]).collect();
    OverlapWeights { h, w }
}

/// Horvitz-Thompson IPW: divides by `n`, not by the weight sums.
pub fn estimate_ipw(data: &Dataset, prop: &PropensityFit, pair: Pair) -> Result<EffectEstimate> {
    pair.check(data.k())?;
    let n = data.n();
    let psi: Vec<f64> = (0..n)
        .map(|i| {
            let ti = data.t()[i];
            let sign = if ti == pair.treated {
                1.0
            } else if ti == pair.reference {
                -1.0
            } else {
                0.0
            };
            sign * data.y()[i] / prop.probs[(i, ti)]
        })
        .collect();
    let tau = psi.iter().sum::<f64>() / n as f64;
    let var = psi.iter().map(|p| (p - tau).powi(2)).sum::<f64>() / (n * n) as f64;
    Ok(EffectEstimate::new(Method::Ipw, pair, tau, var, n))
}

struct ArmSums {
    weight: f64,
    weighted_y: f64,
}

fn arm_sums(data: &Dataset, w: &[f64], level: usize) -> Result<ArmSums> {
    let mut s = ArmSums {
        weight: 0.0,
        weighted_y: 0.0,
    };
    for ((&ti, &y), &wi) in data.t().iter().zip(data.y()).zip(w) {
        if ti == level {
            s.weight += wi;
            s.weighted_y += wi * y;
        }
    }
    if !(s.weight > MIN_WEIGHT_SUM) {
        return Err(Error::DegenerateGroup(format!(
            "overlap weights of level {} sum to {:e}",
            level + 1,
            s.weight
        )));
    }
    Ok(s)
}

/// Per-row OW influence terms, as in the weights-known variance; they
/// average to zero exactly.
pub fn ow_influence(data: &Dataset, ow: &OverlapWeights, pair: Pair) -> Result<Vec<f64>> {
    pair.check(data.k())?;
    let a = arm_sums(data, &ow.w, pair.treated)?;
    let b = arm_sums(data, &ow.w, pair.reference)?;
    let (mean_t, mean_r) = (a.weighted_y / a.weight, b.weighted_y / b.weight);
    let hbar = ow.mean_h();
    Ok((0..data.n())
        .map(|i| {
            let ti = data.t()[i];
            let y = data.y()[i];
            if ti == pair.treated {
                (y - mean_t) * ow.w[i] / hbar
            } else if ti == pair.reference {
                -(y - mean_r) * ow.w[i] / hbar
            } else {
                0.0
            }
        })
        .collect())
}

/// Ratio of weighted means (Hajek form).
pub fn estimate_ow(data: &Dataset, ow: &OverlapWeights, pair: Pair) -> Result<EffectEstimate> {
    pair.check(data.k())?;
    let a = arm_sums(data, &ow.w, pair.treated)?;
    let b = arm_sums(data, &ow.w, pair.reference)?;
    let tau = a.weighted_y / a.weight - b.weighted_y / b.weight;
    let n = data.n();
    let var = ow_influence(data, ow, pair)?.iter().map(|d| d * d).sum::<f64>() / (n * n) as f64;
    Ok(EffectEstimate::new(Method::Ow, pair, tau, var, n))
}

/// Per-row A-OW influence terms before centering; their mean is the A-OW
/// estimate. Residual terms are normalized by each arm's weight sum.
pub fn aow_influence(data: &Dataset, ow: &OverlapWeights, mu: &DMatrix<f64>, pair: Pair) -> Result<Vec<f64>> {
    pair.check(data.k())?;
    assert_eq!(mu.nrows(), data.n());
    let n = data.n() as f64;
    let st = arm_sums(data, &ow.w, pair.treated)?.weight;
    let sr = arm_sums(data, &ow.w, pair.reference)?.weight;
    let hbar = ow.mean_h();
    let (t, r) = (pair.treated, pair.reference);
    Ok((0..data.n())
        .map(|i| {
            let ti = data.t()[i];
            let y = data.y()[i];
            let mut phi = ow.h[i] / hbar * (mu[(i, t)] - mu[(i, r)]);
            if ti == t {
                phi += n * ow.w[i] * (y - mu[(i, t)]) / st;
            } else if ti == r {
                phi -= n * ow.w[i] * (y - mu[(i, r)]) / sr;
            }
            phi
        })
        .collect())
}

/// Augmented overlap weights with outcome predictions `mu` (n x k).
pub fn estimate_aow_with(
    data: &Dataset,
    ow: &OverlapWeights,
    mu: &DMatrix<f64>,
    pair: Pair,
) -> Result<EffectEstimate> {
    let (t, r) = (pair.treated, pair.reference);
    let ow_est = estimate_ow(data, ow, pair)?;
    let sum_h: f64 = ow.h.iter().sum();
    let model_contrast = (0..data.n()).map(|i| ow.h[i] * (mu[(i, t)] - mu[(i, r)])).sum::<f64>() / sum_h;
    let weighted_model_mean = |level: usize| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..data.n() {
            if data.t()[i] == level {
                num += ow.w[i] * mu[(i, level)];
                den += ow.w[i];
            }
        }
        num / den
    };
    let tau = ow_est.tau_hat + model_contrast - weighted_model_mean(t) + weighted_model_mean(r);

    let n = data.n();
    let phi = aow_influence(data, ow, mu, pair)?;
    let var = phi.iter().map(|p| (p - tau).powi(2)).sum::<f64>() / (n * n) as f64;
    Ok(EffectEstimate::new(Method::Aow, pair, tau, var, n))
}

pub fn estimate_aow(data: &Dataset, ow: &OverlapWeights, out: &OutcomeFit, pair: Pair) -> Result<EffectEstimate> {
    estimate_aow_with(data, ow, &out.predict_all(data.x()), pair)
}
