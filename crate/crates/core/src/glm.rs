//! Least squares, binary/fractional logistic regression and multinomial
//! logistic regression, fitted by Newton's method with step-halving.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Floor applied to fitted probabilities before any inverse weighting.
pub const PROB_FLOOR: f64 = 1e-6;

const GRAD_TOL: f64 = 1e-8;
const LOGISTIC_MAX_ITER: usize = 100;
const MULTINOMIAL_MAX_ITER: usize = 200;
const SEPARATION_BOUND: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coefficients: DVector<f64>,
    pub residual_variance: f64,
    /// True when the ridge fallback was used.
    pub ridge: bool,
}

impl LinearFit {
    pub fn predict(&self, design: &DMatrix<f64>) -> DVector<f64> {
        design * &self.coefficients
    }
}

/// Ordinary least squares by Householder QR, falling back to a tiny ridge
/// (`1e-8 * trace(X'X) / q`) when the design is numerically rank-deficient.
pub fn fit_ols(design: &DMatrix<f64>, y: &[f64]) -> Result<LinearFit> {
    let (n, q) = design.shape();
    if n != y.len() {
        return Err(Error::InvalidDesign(format!(
            "design has {n} rows, outcome {}",
            y.len()
        )));
    }
    if n < q {
        return Err(Error::InvalidDesign(format!("{n} rows for {q} columns")));
    }
    let yv = DVector::from_column_slice(y);
    let qr = design.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let full_rank = diag_max > 0.0 && r.diagonal().iter().all(|v| v.abs() > 1e-10 * diag_max);

    let (coefficients, ridge) = if full_rank {
        let qty = qr.q().transpose() * &yv;
        let beta = r
            .solve_upper_triangular(&qty)
            .ok_or_else(|| Error::RankDeficient("triangular solve failed".into()))?;
        (beta, false)
    } else {
        let xtx = design.tr_mul(design);
        let xty = design.tr_mul(&yv);
        let beta = solve_ridge(&xtx, &xty)
            .ok_or_else(|| Error::RankDeficient(format!("{q}-column design beyond ridge fallback")))?;
        (beta, true)
    };
    if coefficients.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient("non-finite coefficients".into()));
    }
    let resid = &yv - design * &coefficients;
    let rss = resid.norm_squared();
    let residual_variance = if n > q { rss / (n - q) as f64 } else { 0.0 };
    Ok(LinearFit {
        coefficients,
        residual_variance,
        ridge,
    })
}

/// Solves `a x = b` for symmetric positive semi-definite `a`, retrying once
/// with the ridge `1e-8 * trace(a) / q` added to the diagonal.
pub(crate) fn solve_ridge(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let q = a.nrows();
    let lambda = 1e-8 * a.trace() / q as f64;
    if !(lambda > 0.0) {
        return None;
    }
    let mut reg = a.clone();
    for j in 0..q {
        reg[(j, j)] += lambda;
    }
    let x = reg.cholesky()?.solve(b);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// A coefficient beyond +-20; the fit is then reported as not converged.
    pub separated: bool,
    /// Quasi log-likelihood after each accepted iterate, starting at zero.
    pub loglik_trace: Vec<f64>,
}

impl LogisticFit {
    pub fn linear_predictor(&self, design: &DMatrix<f64>, offset: Option<&[f64]>) -> DVector<f64> {
        let mut eta = design * &self.coefficients;
        if let Some(o) = offset {
            for (e, oi) in eta.iter_mut().zip(o) {
                *e += oi;
            }
        }
        eta
    }

    /// Fitted probabilities, clipped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
    pub fn predict(&self, design: &DMatrix<f64>, offset: Option<&[f64]>) -> DVector<f64> {
        self.linear_predictor(design, offset)
            .map(|e| expit(e).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Weighted logistic regression by Newton-Raphson with step-halving.
///
/// Responses may be fractional in `[0, 1]` (quasi-likelihood), which the
/// targeting step needs for rescaled continuous outcomes.
pub fn fit_logistic(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    offset: Option<&[f64]>,
) -> Result<LogisticFit> {
    let (n, q) = design.shape();
    if y.len() != n {
        return Err(Error::InvalidDesign(format!("design has {n} rows, outcome {}", y.len())));
    }
    if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidData("logistic response outside [0, 1]".into()));
    }
    if let Some(w) = weights {
        if w.len() != n || w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidData("weights must be finite, non-negative, length n".into()));
        }
    }
    if offset.is_some_and(|o| o.len() != n) {
        return Err(Error::InvalidData("offset length differs from n".into()));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let off = |i: usize| offset.map_or(0.0, |o| o[i]);

    let loglik = |beta: &DVector<f64>| -> f64 {
        let eta = design * beta;
        (0..n)
            .map(|i| {
                let e = eta[i] + off(i);
                w(i) * (y[i] * e - softplus(e))
            })
            .sum()
    };

    let mut beta = DVector::zeros(q);
    let mut ll = loglik(&beta);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut scaled = DMatrix::zeros(n, q);
    for iter in 0..LOGISTIC_MAX_ITER {
        iterations = iter;
        let eta = design * &beta;
        let mut resid = DVector::zeros(n);
        for i in 0..n {
            let p = expit(eta[i] + off(i));
            resid[i] = w(i) * (y[i] - p);
            let curv = w(i) * p * (1.0 - p);
            for j in 0..q {
                scaled[(i, j)] = design[(i, j)] * curv;
            }
        }
        let grad = design.tr_mul(&resid);
        if grad.amax() < GRAD_TOL {
            converged = true;
            break;
        }
        let hess = design.tr_mul(&scaled);
        let Some(step) = solve_ridge(&hess, &grad) else {
            break;
        };
        match halving_step(&beta, &step, ll, &loglik) {
            Some((b, l)) => {
                beta = b;
                ll = l;
                trace.push(ll);
            }
            None => break,
        }
        iterations = iter + 1;
    }
    // Under separation the score vanishes as coefficients diverge, so a
    // small gradient alone does not mean the MLE exists.
    let separated = beta.amax() > SEPARATION_BOUND;
    Ok(LogisticFit {
        coefficients: beta,
        converged: converged && !separated,
        iterations,
        separated,
        loglik_trace: trace,
    })
}

/// Takes the Newton step, halving it until the objective does not drop.
fn halving_step(
    beta: &DVector<f64>,
    step: &DVector<f64>,
    ll: f64,
    loglik: &impl Fn(&DVector<f64>) -> f64,
) -> Option<(DVector<f64>, f64)> {
    let slack = 1e-12 * ll.abs().max(1.0);
    let mut scale = 1.0;
    for _ in 0..40 {
        let cand = beta + step * scale;
        let l = loglik(&cand);
        if l.is_finite() && l >= ll - slack {
            // Rounding can make an accepted step marginally lower; keep the
            // reported trace monotone.
            return Some((cand, l.max(ll)));
        }
        scale *= 0.5;
    }
    None
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialFit {
    /// Row `l - 1` holds the coefficients of level `l` against level 0.
    pub coefficients: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub loglik_trace: Vec<f64>,
}

impl MultinomialFit {
    pub fn k(&self) -> usize {
        self.coefficients.nrows() + 1
    }
}

/// Multinomial logistic regression (level 0 as reference) by damped Newton.
pub fn fit_multinomial(design: &DMatrix<f64>, t: &[usize], k: usize) -> Result<MultinomialFit> {
    let (n, q) = design.shape();
    if t.len() != n {
        return Err(Error::InvalidDesign(format!("design has {n} rows, treatment {}", t.len())));
    }
    let mut counts = vec![0usize; k];
    for &ti in t {
        if ti >= k {
            return Err(Error::InvalidData(format!("treatment code {} beyond k = {k}", ti + 1)));
        }
        counts[ti] += 1;
    }
    if let Some(level) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyLevel(level + 1));
    }
    let m = k - 1;
    let dim = m * q;
    let as_matrix = |theta: &DVector<f64>| DMatrix::from_fn(m, q, |l, j| theta[l * q + j]);

    let loglik = |theta: &DVector<f64>| -> f64 {
        let eta = design * as_matrix(theta).transpose();
        (0..n)
            .map(|i| {
                let row = eta.row(i);
                let lse = log_sum_exp_with_zero(row.iter().copied());
                let own = if t[i] == 0 { 0.0 } else { row[t[i] - 1] };
                own - lse
            })
            .sum()
    };

    let mut theta = DVector::zeros(dim);
    let mut ll = loglik(&theta);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..MULTINOMIAL_MAX_ITER {
        iterations = iter;
        let probs = softmax_rows(&(design * as_matrix(&theta).transpose()));
        let (grad, hess) = multinomial_grad_hess(design, t, &probs);
        if grad.amax() < GRAD_TOL {
            converged = true;
            break;
        }
        let Some(step) = solve_ridge(&hess, &grad) else {
            break;
        };
        match halving_step(&theta, &step, ll, &loglik) {
            Some((th, l)) => {
                theta = th;
                ll = l;
                trace.push(ll);
            }
            None => break,
        }
        iterations = iter + 1;
    }
    Ok(MultinomialFit {
        coefficients: as_matrix(&theta),
        converged,
        iterations,
        loglik_trace: trace,
    })
}

/// Score and negated Hessian of the multinomial log-likelihood at the
/// (unclipped) probabilities `probs`; parameters are stacked by level.
pub(crate) fn multinomial_grad_hess(
    design: &DMatrix<f64>,
    t: &[usize],
    probs: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let (n, q) = design.shape();
    let m = probs.ncols() - 1;
    let dim = m * q;
    let mut grad = DVector::zeros(dim);
    for l in 0..m {
        let resid = DVector::from_fn(n, |i, _| f64::from(u8::from(t[i] == l + 1)) - probs[(i, l + 1)]);
        grad.rows_mut(l * q, q).copy_from(&design.tr_mul(&resid));
    }
    let mut hess = DMatrix::zeros(dim, dim);
    let mut scaled = DMatrix::zeros(n, q);
    for a in 0..m {
        for b in a..m {
            for i in 0..n {
                let pa = probs[(i, a + 1)];
                let c = if a == b { pa * (1.0 - pa) } else { -pa * probs[(i, b + 1)] };
                for j in 0..q {
                    scaled[(i, j)] = design[(i, j)] * c;
                }
            }
            let block = design.tr_mul(&scaled);
            hess.view_mut((a * q, b * q), (q, q)).copy_from(&block);
            if a != b {
                hess.view_mut((b * q, a * q), (q, q)).copy_from(&block.transpose());
            }
        }
    }
    (grad, hess)
}

/// Multinomial log-likelihood of `t` under unclipped probabilities.
pub(crate) fn multinomial_loglik(t: &[usize], probs: &DMatrix<f64>) -> f64 {
    t.iter().enumerate().map(|(i, &ti)| probs[(i, ti)].ln()).sum()
}

fn log_sum_exp_with_zero(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = values.clone().fold(0.0f64, f64::max);
    let s: f64 = (-mx).exp() + values.map(|v| (v - mx).exp()).sum::<f64>();
    mx + s.ln()
}

/// Row-wise softmax over `(0, eta_1, .., eta_{k-1})`, without clipping.
pub(crate) fn softmax_rows(eta: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = eta.shape();
    let mut out = DMatrix::zeros(n, m + 1);
    for i in 0..n {
        let mx = eta.row(i).iter().fold(0.0f64, |a, &b| a.max(b));
        let mut total = (-mx).exp();
        out[(i, 0)] = total;
        for l in 0..m {
            let e = (eta[(i, l)] - mx).exp();
            out[(i, l + 1)] = e;
            total += e;
        }
        for l in 0..=m {
            out[(i, l)] /= total;
        }
    }
    out
}

/// n x k fitted probabilities: softmax, clipped to `[1e-6, 1 - 1e-6]`,
/// then renormalized.
pub fn predict_probs(fit: &MultinomialFit, design: &DMatrix<f64>) -> DMatrix<f64> {
    let eta = design * fit.coefficients.transpose();
    let mut probs = softmax_rows(&eta);
    clip_and_normalize(&mut probs);
    probs
}

pub(crate) fn clip_and_normalize(probs: &mut DMatrix<f64>) {
    for i in 0..probs.nrows() {
        let mut total = 0.0;
        for l in 0..probs.ncols() {
            let v = probs[(i, l)].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            probs[(i, l)] = v;
            total += v;
        }
        for l in 0..probs.ncols() {
            probs[(i, l)] /= total;
        }
    }
}
