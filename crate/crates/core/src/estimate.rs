//! Effect estimates shared by every estimator, and the unadjusted baseline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{Dataset, Pair};

/// Normal quantile for two-sided 95% intervals.
pub const Z95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Crude,
    Stan,
    Ipw,
    Match,
    Bcm,
    Tmle,
    Ow,
    Aow,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Crude,
        Method::Stan,
        Method::Ipw,
        Method::Match,
        Method::Bcm,
        Method::Tmle,
        Method::Ow,
        Method::Aow,
    ];

    /// Command-line spelling.
    pub fn key(&self) -> &'static str {
        match self {
            Method::Crude => "crude",
            Method::Stan => "stan",
            Method::Ipw => "ipw",
            Method::Match => "match",
            Method::Bcm => "bcm",
            Method::Tmle => "tmle",
            Method::Ow => "ow",
            Method::Aow => "aow",
        }
    }

    /// Label used in result tables.
    pub fn label(&self) -> &'static str {
        match self {
            Method::Crude => "Crude",
            Method::Stan => "stan",
            Method::Ipw => "IPW",
            Method::Match => "match",
            Method::Bcm => "BCM",
            Method::Tmle => "TMLE",
            Method::Ow => "OW",
            Method::Aow => "A-OW",
        }
    }

    pub fn estimand(&self) -> Estimand {
        match self {
            Method::Ow | Method::Aow => Estimand::Overlap,
            _ => Estimand::Population,
        }
    }

    pub fn needs_outcome_model(&self) -> bool {
        matches!(self, Method::Stan | Method::Bcm | Method::Tmle | Method::Aow)
    }

    pub fn needs_propensity(&self) -> bool {
        matches!(self, Method::Ipw | Method::Tmle | Method::Ow | Method::Aow)
    }

    pub fn needs_matches(&self) -> bool {
        matches!(self, Method::Match | Method::Bcm)
    }

    /// Parses a comma-separated list, keeping the canonical order and
    /// dropping duplicates.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out: Vec<Method> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(Method::from_str)
            .collect::<Result<_>>()?;
        if out.is_empty() {
            return Err(Error::Config("empty method list".into()));
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "");
        Method::ALL
            .into_iter()
            .find(|m| m.key() == key)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// What an estimate is consistent for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    /// `E[Y(t) - Y(t')]`.
    Population,
    /// The same contrast averaged with weights `h(X)`.
    Overlap,
}

impl fmt::Display for Estimand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimand::Population => "population",
            Estimand::Overlap => "overlap",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub pair: Pair,
    pub tau_hat: f64,
    pub variance: f64,
    pub ci95: (f64, f64),
    pub estimand: Estimand,
    pub method: Method,
    pub n_used: usize,
}

impl EffectEstimate {
    /// Builds the estimate and its Wald interval. Negative variances
    /// (round-off) are clamped to zero; a NaN variance marks an estimate
    /// without inference.
    pub fn new(method: Method, pair: Pair, tau_hat: f64, variance: f64, n_used: usize) -> EffectEstimate {
        let variance = if variance.is_nan() { variance } else { variance.max(0.0) };
        let half = Z95 * variance.sqrt();
        EffectEstimate {
            pair,
            tau_hat,
            variance,
            ci95: (tau_hat - half, tau_hat + half),
            estimand: method.estimand(),
            method,
            n_used,
        }
    }

    pub fn std_error(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci95.0 <= truth && truth <= self.ci95.1
    }

    pub fn has_variance(&self) -> bool {
        self.variance.is_finite()
    }
}

/// Difference in group means with the unpooled two-sample variance.
pub fn estimate_crude(data: &Dataset, pair: Pair) -> Result<EffectEstimate> {
    pair.check(data.k())?;
    let stats = |level: usize| -> Result<(f64, f64, usize)> {
        let ys: Vec<f64> = data
            .t()
            .iter()
            .zip(data.y())
            .filter(|(&t, _)| t == level)
            .map(|(_, &y)| y)
            .collect();
        let n = ys.len();
        if n < 2 {
            return Err(Error::DegenerateGroup(format!(
                "level {} has {n} rows; the crude variance needs two",
                level + 1
            )));
        }
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Ok((mean, var, n))
    };
    let (m1, v1, n1) = stats(pair.treated)?;
    let (m0, v0, n0) = stats(pair.reference)?;
    Ok(EffectEstimate::new(
        Method::Crude,
        pair,
        m1 - m0,
        v1 / n1 as f64 + v0 / n0 as f64,
        n1 + n0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn method_parsing() {
        assert_eq!(Method::from_str("A-OW").unwrap(), Method::Aow);
        assert_eq!(
            Method::parse_list("tmle, crude,aow,crude").unwrap(),
            vec![Method::Crude, Method::Tmle, Method::Aow]
        );
        assert!(Method::parse_list("ipw,forest").is_err());
        assert!(Method::parse_list("").is_err());
    }

    #[test]
    fn interval_is_symmetric_wald() {
        let e = EffectEstimate::new(Method::Ipw, Pair::new(1, 0).unwrap(), 0.5, 0.04, 10);
        assert_eq!(e.ci95, (0.5 - 1.96 * 0.2, 0.5 + 1.96 * 0.2));
        assert_eq!(e.estimand, Estimand::Population);
        assert!(e.covers(0.6) && !e.covers(0.95));
        let o = EffectEstimate::new(Method::Ow, Pair::new(1, 0).unwrap(), 0.0, -1e-18, 10);
        assert_eq!(o.variance, 0.0);
        assert_eq!(o.estimand, Estimand::Overlap);
    }

    #[test]
    fn crude_hand_example() {
        let x = DMatrix::from_element(5, 1, 0.0);
        let ds = Dataset::new(vec!["X".into()], x, vec![0, 0, 1, 1, 1], 2, vec![1.0, 3.0, 2.0, 4.0, 6.0]).unwrap();
        let e = estimate_crude(&ds, Pair::new(1, 0).unwrap()).unwrap();
        assert!((e.tau_hat - 2.0).abs() < 1e-12);
        // s^2 = 2 and 4.
        assert!((e.variance - (2.0 / 2.0 + 4.0 / 3.0)).abs() < 1e-12);
        assert_eq!(e.n_used, 5);
    }
}
