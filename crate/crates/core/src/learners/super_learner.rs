use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{GlmLearner, GlmOutcome, OutcomeModel};
use crate::error::{Error, Result};
use crate::tabular::Dataset;

/// Cross-validated convex combination of GLM outcome learners.
#[derive(Debug, Clone)]
pub struct SuperLearnerFit {
    pub names: Vec<String>,
    /// Non-negative, summing to one.
    pub weights: DVector<f64>,
    /// Mean squared cross-validated error of each candidate.
    pub cv_risk: Vec<f64>,
    /// Cross-validated predictions, one column per candidate.
    pub cv_predictions: DMatrix<f64>,
    pub folds: usize,
    fits: Vec<GlmOutcome>,
}

impl SuperLearnerFit {
    pub fn ensemble_cv_risk(&self, y: &[f64]) -> f64 {
        let pred = &self.cv_predictions * &self.weights;
        pred.iter().zip(y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / y.len() as f64
    }
}

impl OutcomeModel for SuperLearnerFit {
    fn predict_all(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out: Option<DMatrix<f64>> = None;
        for (fit, &w) in self.fits.iter().zip(self.weights.iter()) {
            if w == 0.0 {
                continue;
            }
            let p = fit.predict_all(x) * w;
            out = Some(match out {
                Some(acc) => acc + p,
                None => p,
            });
        }
        out.expect("at least one positive weight")
    }
}

/// Fold label in `0..folds` for every row; a function of `(n, folds, seed)`.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// V-fold cross-validation of every candidate, non-negative least squares
/// of `Y` on the CV predictions normalized to the simplex, then refits on
/// all rows.
pub fn fit_super_learner(
    data: &Dataset,
    candidates: &[GlmLearner],
    folds: usize,
    seed: u64,
) -> Result<SuperLearnerFit> {
    let n = data.n();
    if candidates.is_empty() {
        return Err(Error::Config("super learner needs at least one candidate".into()));
    }
    if folds < 2 || n < 2 * folds {
        return Err(Error::Config(format!("{folds} folds for {n} rows")));
    }
    let fold = fold_assignment(n, folds, seed);
    let per_fold: Vec<Result<(Vec<usize>, Vec<Vec<f64>>)>> = (0..folds)
        .into_par_iter()
        .map(|v| {
            let train: Vec<usize> = (0..n).filter(|&i| fold[i] != v).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold[i] == v).collect();
            let train_data = data.subset(&train)?;
            let x_test = DMatrix::from_fn(test.len(), data.p(), |r, j| data.x()[(test[r], j)]);
            let t_test: Vec<usize> = test.iter().map(|&i| data.t()[i]).collect();
            let preds = candidates
                .iter()
                .map(|c| Ok(c.fit(&train_data)?.predict_observed(&x_test, &t_test)))
                .collect::<Result<Vec<_>>>()?;
            Ok((test, preds))
        })
        .collect();

    let mut z = DMatrix::zeros(n, candidates.len());
    for res in per_fold {
        let (test, preds) = res?;
        for (c, p) in preds.iter().enumerate() {
            for (r, &i) in test.iter().enumerate() {
                z[(i, c)] = p[r];
            }
        }
    }

    let y = DVector::from_column_slice(data.y());
    let cv_risk: Vec<f64> = (0..candidates.len())
        .map(|c| (z.column(c) - &y).norm_squared() / n as f64)
        .collect();
    let raw = super::nnls(&z, &y);
    let total = raw.sum();
    let weights = if total > 0.0 {
        raw / total
    } else {
        let best = (0..cv_risk.len())
            .min_by(|&a, &b| cv_risk[a].total_cmp(&cv_risk[b]))
            .expect("non-empty");
        DVector::from_fn(candidates.len(), |c, _| f64::from(u8::from(c == best)))
    };

    let fits = candidates
        .iter()
        .zip(weights.iter())
        .map(|(c, &w)| if w > 0.0 { c.fit(data).map(Some) } else { Ok(None) })
        .collect::<Result<Vec<_>>>()?;
    // Zero-weight candidates are never evaluated; keep a cheap placeholder.
    let placeholder = fits.iter().flatten().next().expect("positive weight").clone();
    let fits = fits
        .into_iter()
        .map(|f| f.unwrap_or_else(|| placeholder.clone()))
        .collect();

    Ok(SuperLearnerFit {
        names: candidates.iter().map(|c| c.name.clone()).collect(),
        weights,
        cv_risk,
        cv_predictions: z,
        folds,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{default_candidates, nnls, Link};
    use crate::tabular::{DesignSpec, Term};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn linear_data(n: usize, seed: u64, signal: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = DMatrix::from_fn(n, 3, |_, j| {
            if j == 2 {
                f64::from(u8::from(rng.random::<f64>() < 0.4))
            } else {
                normal.sample(&mut rng)
            }
        });
        let t: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                signal * (x[(i, 0)] + 0.5 * x[(i, 1)] - x[(i, 2)]) + t[i] as f64 + normal.sample(&mut rng)
            })
            .collect();
        Dataset::new(vec!["X1".into(), "X2".into(), "X3".into()], x, t, 3, y).unwrap()
    }

    #[test]
    fn folds_are_deterministic_and_balanced() {
        let a = fold_assignment(103, 10, 42);
        assert_eq!(a, fold_assignment(103, 10, 42));
        assert_ne!(a, fold_assignment(103, 10, 43));
        for v in 0..10 {
            let c = a.iter().filter(|&&f| f == v).count();
            assert!(c == 10 || c == 11);
        }
    }

    #[test]
    fn single_candidate_gets_unit_weight() {
        let ds = linear_data(200, 1, 1.0);
        let cands = default_candidates(&ds);
        let sl = fit_super_learner(&ds, &cands[..1], 10, 0).unwrap();
        assert_eq!(sl.weights.as_slice(), &[1.0]);
    }

    #[test]
    fn duplicate_candidates_predict_like_one() {
        let ds = linear_data(200, 2, 1.0);
        let c = default_candidates(&ds)[0].clone();
        let sl = fit_super_learner(&ds, &[c.clone(), c.clone()], 10, 0).unwrap();
        let single = c.fit(&ds).unwrap().predict_all(ds.x());
        let ens = sl.predict_all(ds.x());
        assert!((ens - single).amax() < 1e-10);
        assert!((sl.weights.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn truth_beats_constant() {
        let ds = linear_data(2000, 3, 2.0);
        let truth = GlmLearner::new("truth", DesignSpec::main_terms(ds.columns(), true), Link::Identity);
        let constant = GlmLearner::new("mean", DesignSpec::new(vec![Term::Intercept], false), Link::Identity);
        let constant = GlmLearner {
            spec: DesignSpec::new(vec![Term::Intercept], false),
            ..constant
        };
        let sl = fit_super_learner(&ds, &[truth, constant], 10, 7).unwrap();
        assert!(sl.weights[0] > 0.9, "weights {:?}", sl.weights);
    }

    #[test]
    fn main_terms_candidate_wins_on_linear_truth() {
        let ds = linear_data(2000, 4, 1.0);
        let sl = fit_super_learner(&ds, &default_candidates(&ds), 10, 11).unwrap();
        let r = &sl.cv_risk;
        assert!(r[0] <= r[1] && r[0] <= r[2], "cv risks {r:?}");
        assert!(sl.weights[0] > 0.5, "weights {:?}", sl.weights);
    }

    #[test]
    fn reoptimized_weights_no_worse_than_best_candidate() {
        let ds = linear_data(500, 5, 1.0);
        let sl = fit_super_learner(&ds, &default_candidates(&ds), 10, 3).unwrap();
        let y = DVector::from_column_slice(ds.y());
        let w = nnls(&sl.cv_predictions, &y);
        let loss = (&sl.cv_predictions * w - &y).norm_squared() / ds.n() as f64;
        let best = sl.cv_risk.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(loss <= best + 1e-8);
        assert!(sl.weights.iter().all(|&w| w >= 0.0));
        assert!((sl.weights.sum() - 1.0).abs() < 1e-12);
    }
}
