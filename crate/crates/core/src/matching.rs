//! Nearest-neighbour matching with replacement, the matching and
//! bias-corrected matching estimators, and an Abadie-Imbens type variance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{EffectEstimate, Method};
use crate::learners::OutcomeFit;
use crate::tabular::{Dataset, Pair};

/// Inverse-variance scaling, as in the usual matching software defaults.
pub const DEFAULT_METRIC: Metric = Metric::Euclidean;

/// Ridge added to the covariance diagonal when it is not positive definite.
const COVARIANCE_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `A` = inverse sample covariance of the covariates.
    Mahalanobis,
    /// `A` = diagonal of inverse sample variances.
    Euclidean,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Mahalanobis => "mahalanobis",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mahalanobis" => Ok(Metric::Mahalanobis),
            "euclidean" | "euclidean-standardized" | "standardized" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown matching metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatchSets {
    pub m: usize,
    pub metric: Metric,
    /// The positive-definite matrix of the distance `||x||_A`.
    pub a: DMatrix<f64>,
    /// `matches[i][t]`: the `m` donors of level `t` for row `i`, nearest
    /// first; empty when `t` is row `i`'s own level.
    pub matches: Vec<Vec<Vec<usize>>>,
    /// Number of times each row serves as a donor.
    pub usage: Vec<usize>,
    /// Nearest other row of the same level (for the conditional variance),
    /// `None` when the level has a single row.
    pub own_nearest: Vec<Option<usize>>,
}

impl MatchSets {
    pub fn donors(&self, i: usize, level: usize) -> &[usize] {
        &self.matches[i][level]
    }
}

/// Covariates mapped so that Euclidean distance equals the `A`-distance,
/// together with `A`.
pub fn whiten(x: &DMatrix<f64>, metric: Metric) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, p) = x.shape();
    let means: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
    let centered = DMatrix::from_fn(n, p, |i, j| x[(i, j)] - means[j]);
    let denom = (n.max(2) - 1) as f64;
    let mut cov = centered.tr_mul(&centered) / denom;
    if metric == Metric::Euclidean {
        cov = DMatrix::from_diagonal(&cov.diagonal());
    }
    for j in 0..p {
        if !(cov[(j, j)] > 0.0) {
            cov[(j, j)] = 1.0;
        }
    }
    let chol = Cholesky::new(cov.clone()).unwrap_or_else(|| {
        let mut c = cov.clone();
        for j in 0..p {
            c[(j, j)] += COVARIANCE_RIDGE * cov[(j, j)].max(1.0);
        }
        Cholesky::new(c).expect("ridged covariance is positive definite")
    });
    let l = chol.l();
    let a = chol.inverse();
    // Rows z_i solve L z_i = x_i, so |z_i - z_j|^2 = (x_i - x_j)' A (x_i - x_j).
    let z = l
        .solve_lower_triangular(&x.transpose())
        .expect("triangular factor is nonsingular")
        .transpose();
    (z, a)
}

fn sq_dist(z: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..z.ncols()).map(|c| (z[(i, c)] - z[(j, c)]).powi(2)).sum()
}

#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Donor pool of one level sorted on the first whitened coordinate.
struct Pool {
    rows: Vec<usize>,
    keys: Vec<f64>,
}

impl Pool {
    fn new(z: &DMatrix<f64>, mut rows: Vec<usize>) -> Pool {
        rows.sort_by(|&a, &b| z[(a, 0)].total_cmp(&z[(b, 0)]).then(a.cmp(&b)));
        let keys = rows.iter().map(|&r| z[(r, 0)]).collect();
        Pool { rows, keys }
    }

    /// The `m` nearest rows to `query` by `(distance, index)`, excluding
    /// `exclude`.
    fn nearest(&self, z: &DMatrix<f64>, query: usize, m: usize, exclude: Option<usize>) -> Vec<usize> {
        let q0 = z[(query, 0)];
        let start = self.keys.partition_point(|&k| k < q0);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(m + 1);
        let consider = |pos: usize, heap: &mut BinaryHeap<Candidate>| {
            let r = self.rows[pos];
            if Some(r) == exclude {
                return;
            }
            let c = Candidate(sq_dist(z, query, r), r);
            if heap.len() < m {
                heap.push(c);
            } else if c < *heap.peek().expect("non-empty") {
                heap.pop();
                heap.push(c);
            }
        };
        let bound = |heap: &BinaryHeap<Candidate>| {
            if heap.len() < m {
                f64::INFINITY
            } else {
                heap.peek().expect("non-empty").0
            }
        };
        let (mut lo, mut hi) = (start, start);
        loop {
            let worst = bound(&heap);
            let left = (lo > 0).then(|| (q0 - self.keys[lo - 1]).powi(2)).filter(|&d| d <= worst);
            let right = (hi < self.rows.len())
                .then(|| (self.keys[hi] - q0).powi(2))
                .filter(|&d| d <= worst);
            match (left, right) {
                (None, None) => break,
                (Some(l), Some(r)) if l <= r => {
                    lo -= 1;
                    consider(lo, &mut heap);
                }
                (Some(_), None) => {
                    lo -= 1;
                    consider(lo, &mut heap);
                }
                _ => {
                    consider(hi, &mut heap);
                    hi += 1;
                }
            }
        }
        heap.into_sorted_vec().into_iter().map(|c| c.1).collect()
    }
}

/// Exact `m`-nearest-neighbour donors of every other level for every row.
/// Ties are broken by the smaller row index.
pub fn build_matches(data: &Dataset, m: usize, metric: Metric) -> Result<MatchSets> {
    if m == 0 {
        return Err(Error::Config("the number of matches must be positive".into()));
    }
    let counts = data.level_counts();
    for (level, &c) in counts.iter().enumerate() {
        if c < m {
            return Err(Error::TooFewDonors {
                level: level + 1,
                available: c,
                needed: m,
            });
        }
    }
    let (z, a) = whiten(data.x(), metric);
    let k = data.k();
    let pools: Vec<Pool> = (0..k)
        .map(|level| Pool::new(&z, (0..data.n()).filter(|&i| data.t()[i] == level).collect()))
        .collect();

    let per_row: Vec<(Vec<Vec<usize>>, Option<usize>)> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let own = data.t()[i];
            let sets = (0..k)
                .map(|level| {
                    if level == own {
                        Vec::new()
                    } else {
                        pools[level].nearest(&z, i, m, None)
                    }
                })
                .collect();
            let nn = (counts[own] > 1).then(|| pools[own].nearest(&z, i, 1, Some(i))[0]);
            (sets, nn)
        })
        .collect();

    let mut usage = vec![0; data.n()];
    for (sets, _) in &per_row {
        for &j in sets.iter().flatten() {
            usage[j] += 1;
        }
    }
    let (matches, own_nearest) = per_row.into_iter().unzip();
    Ok(MatchSets {
        m,
        metric,
        a,
        matches,
        usage,
        own_nearest,
    })
}

/// Imputed potential outcome of row `i` under `level`, with an optional
/// regression correction `mu` (n x k).
fn impute(data: &Dataset, ms: &MatchSets, mu: Option<&DMatrix<f64>>, i: usize, level: usize) -> f64 {
    if data.t()[i] == level {
        return data.y()[i];
    }
    let donors = ms.donors(i, level);
    let total: f64 = donors
        .iter()
        .map(|&j| {
            let correction = mu.map_or(0.0, |mu| mu[(i, level)] - mu[(j, level)]);
            data.y()[j] + correction
        })
        .sum();
    total / donors.len() as f64
}

fn estimate_with(
    data: &Dataset,
    ms: &MatchSets,
    mu: Option<&DMatrix<f64>>,
    pair: Pair,
    method: Method,
) -> Result<EffectEstimate> {
    pair.check(data.k())?;
    let n = data.n();
    let diffs: Vec<f64> = (0..n)
        .map(|i| impute(data, ms, mu, i, pair.treated) - impute(data, ms, mu, i, pair.reference))
        .collect();
    let tau = diffs.iter().sum::<f64>() / n as f64;
    let spread: f64 = diffs.iter().map(|d| (d - tau).powi(2)).sum();
    let m = ms.m as f64;
    let reuse: f64 = (0..n)
        .filter(|&i| data.t()[i] == pair.treated || data.t()[i] == pair.reference)
        .map(|i| {
            let k = ms.usage[i] as f64;
            let sigma2 = ms.own_nearest[i].map_or(0.0, |j| (data.y()[i] - data.y()[j]).powi(2) / 2.0);
            ((k / m).powi(2) + (2.0 * m - 1.0) * k / (m * m)) * sigma2
        })
        .sum();
    let var = (spread + reuse) / (n * n) as f64;
    Ok(EffectEstimate::new(method, pair, tau, var, n))
}

pub fn estimate_match(data: &Dataset, ms: &MatchSets, pair: Pair) -> Result<EffectEstimate> {
    estimate_with(data, ms, None, pair, Method::Match)
}

/// Bias-corrected matching with outcome predictions `mu` (n x k).
pub fn estimate_bcm_with(data: &Dataset, ms: &MatchSets, mu: &DMatrix<f64>, pair: Pair) -> Result<EffectEstimate> {
    estimate_with(data, ms, Some(mu), pair, Method::Bcm)
}

pub fn estimate_bcm(data: &Dataset, ms: &MatchSets, out: &OutcomeFit, pair: Pair) -> Result<EffectEstimate> {
    estimate_bcm_with(data, ms, &out.predict_all(data.x()), pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(z: &DMatrix<f64>, t: &[usize], i: usize, level: usize, m: usize) -> Vec<usize> {
        let mut c: Vec<(f64, usize)> = (0..t.len())
            .filter(|&j| t[j] == level)
            .map(|j| (sq_dist(z, i, j), j))
            .collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        c.into_iter().take(m).map(|x| x.1).collect()
    }

    fn one_dim(x: &[f64], t: Vec<usize>, y: Vec<f64>) -> Dataset {
        let k = t.iter().max().unwrap() + 1;
        Dataset::new(vec!["X".into()], DMatrix::from_column_slice(x.len(), 1, x), t, k, y).unwrap()
    }

    #[test]
    fn four_row_example() {
        let ds = one_dim(&[0.0, 1.0, 10.0, 11.0], vec![0, 1, 0, 1], vec![0.0, 1.0, 0.0, 1.0]);
        let ms = build_matches(&ds, 1, Metric::Mahalanobis).unwrap();
        assert_eq!(ms.donors(0, 1), &[1]);
        assert_eq!(ms.donors(2, 1), &[3]);
        assert_eq!(ms.donors(1, 0), &[0]);
        assert_eq!(ms.donors(3, 0), &[2]);
        assert!(ms.donors(0, 0).is_empty());
        let e = estimate_match(&ds, &ms, Pair::new(1, 0).unwrap()).unwrap();
        assert!((e.tau_hat - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let ds = one_dim(&[0.0, 1.0, 1.0, 1.0, 0.9], vec![0, 1, 1, 1, 0], vec![0.0; 5]);
        let ms = build_matches(&ds, 1, Metric::Euclidean).unwrap();
        assert_eq!(ms.donors(0, 1), &[1]);
        let ms2 = build_matches(&ds, 2, Metric::Euclidean).unwrap();
        assert_eq!(ms2.donors(4, 1), &[1, 2]);
    }

    #[test]
    fn matches_equal_brute_force() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let x = DMatrix::from_fn(n, 3, |_, j| {
                if j == 2 {
                    f64::from(u8::from(rng.random::<f64>() < 0.4))
                } else {
                    rng.random::<f64>() * 4.0 - 2.0
                }
            });
            let t: Vec<usize> = (0..n).map(|i| if i < 3 { i } else { rng.random_range(0..3) }).collect();
            let ds = Dataset::new(vec!["a".into(), "b".into(), "c".into()], x, t.clone(), 3, vec![0.0; n]).unwrap();
            for metric in [Metric::Mahalanobis, Metric::Euclidean] {
                for m in [1, 2] {
                    let ms = build_matches(&ds, m, metric).unwrap();
                    let (z, _) = whiten(ds.x(), metric);
                    for i in 0..n {
                        for level in 0..3 {
                            let want = if level == t[i] { vec![] } else { brute_force(&z, &t, i, level, m) };
                            assert_eq!(ms.donors(i, level), want.as_slice(), "row {i} level {level}");
                        }
                    }
                    let per_level = |l: usize| -> usize { (0..n).filter(|&i| t[i] == l).map(|i| ms.usage[i]).sum() };
                    for l in 0..3 {
                        assert_eq!(per_level(l), m * t.iter().filter(|&&v| v != l).count());
                    }
                }
            }
        }
    }

    #[test]
    fn mahalanobis_distance_matches_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(30, 2, |i, j| rng.random::<f64>() + if j == 1 { 0.8 * i as f64 / 30.0 } else { 0.0 });
        let (z, a) = whiten(&x, Metric::Mahalanobis);
        let d = (x.row(3) - x.row(17)).transpose();
        let quad = (d.transpose() * &a * &d)[(0, 0)];
        assert!((sq_dist(&z, 3, 17) - quad).abs() < 1e-10);
    }

    #[test]
    fn constant_outcome_gives_zero() {
        let ds = one_dim(&[0.3, 1.2, 5.0, 2.2, 7.0, 0.1], vec![0, 1, 2, 0, 1, 2], vec![2.5; 6]);
        let ms = build_matches(&ds, 1, Metric::Mahalanobis).unwrap();
        for &p in crate::tabular::ContrastSet::all_pairs(3).pairs() {
            assert_eq!(estimate_match(&ds, &ms, p).unwrap().tau_hat, 0.0);
        }
    }

    #[test]
    fn bcm_equals_match_when_outcome_model_ignores_x() {
        let ds = one_dim(&[0.3, 1.2, 5.0, 2.2, 7.0, 0.1, 3.3], vec![0, 1, 2, 0, 1, 2, 1], vec![1.0, 4.0, -2.0, 0.5, 3.0, 7.0, 2.0]);
        let ms = build_matches(&ds, 2, Metric::Mahalanobis).unwrap();
        let mu = DMatrix::from_fn(7, 3, |_, l| [0.3, 1.7, -4.0][l]);
        for &p in crate::tabular::ContrastSet::all_pairs(3).pairs() {
            let a = estimate_match(&ds, &ms, p).unwrap();
            let b = estimate_bcm_with(&ds, &ms, &mu, p).unwrap();
            assert!((a.tau_hat - b.tau_hat).abs() < 1e-12);
        }
    }

    #[test]
    fn bcm_noiseless_linear_is_exact() {
        let x: Vec<f64> = (0..20).map(|i| if i < 10 { i as f64 } else { 30.0 + i as f64 }).collect();
        let t: Vec<usize> = (0..20).map(|i| usize::from(i >= 10 || i == 0)).collect();
        let y: Vec<f64> = (0..20).map(|i| 1.0 + 0.7 * x[i] + 2.0 * t[i] as f64).collect();
        let ds = one_dim(&x, t, y);
        let ms = build_matches(&ds, 1, Metric::Mahalanobis).unwrap();
        let mu = DMatrix::from_fn(20, 2, |i, l| 1.0 + 0.7 * x[i] + 2.0 * l as f64);
        let e = estimate_bcm_with(&ds, &ms, &mu, Pair::new(1, 0).unwrap()).unwrap();
        assert!((e.tau_hat - 2.0).abs() < 1e-10);
        let plain = estimate_match(&ds, &ms, Pair::new(1, 0).unwrap()).unwrap();
        assert!((plain.tau_hat - 2.0).abs() > 1.0);
    }

    #[test]
    fn too_few_donors() {
        let ds = one_dim(&[0.0, 1.0, 2.0], vec![0, 1, 1], vec![0.0; 3]);
        assert!(matches!(
            build_matches(&ds, 2, Metric::Mahalanobis),
            Err(Error::TooFewDonors { level: 1, available: 1, needed: 2 })
        ));
    }

    #[test]
    fn row_order_invariance_without_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let t: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i] * 3.0 + t[i] as f64 + rng.random::<f64>()).collect();
        let ds = one_dim(&x, t, y);
        let perm: Vec<usize> = (0..n).map(|i| (i * 7) % n).collect();
        let ds2 = ds.subset(&perm).unwrap();
        let p = Pair::new(1, 0).unwrap();
        let a = estimate_match(&ds, &build_matches(&ds, 1, Metric::Mahalanobis).unwrap(), p).unwrap();
        let b = estimate_match(&ds2, &build_matches(&ds2, 1, Metric::Mahalanobis).unwrap(), p).unwrap();
        assert!((a.tau_hat - b.tau_hat).abs() < 1e-12);
        assert!((a.variance - b.variance).abs() < 1e-12);
    }
}
