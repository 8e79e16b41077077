//! Data model, CSV/JSON ingestion and design-matrix construction.
//!
//! Treatment levels are stored zero-based (`0..k`) and rendered one-based
//! (`1..k`) in every report, so level `0` is the reference level "1".

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Continuous,
    Binary,
}

impl OutcomeKind {
    /// Binary iff every value lies in {0, 1}.
    pub fn detect(y: &[f64]) -> OutcomeKind {
        if !y.is_empty() && y.iter().all(|&v| v == 0.0 || v == 1.0) {
            OutcomeKind::Binary
        } else {
            OutcomeKind::Continuous
        }
    }
}

/// Covariates, treatment and outcome for `n` independent units.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<String>,
    x: DMatrix<f64>,
    t: Vec<usize>,
    y: Vec<f64>,
    kind: OutcomeKind,
    k: usize,
    labels: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with zero-based treatment codes `t` in `0..k`.
    /// The outcome kind is auto-detected.
    pub fn new(
        columns: Vec<String>,
        x: DMatrix<f64>,
        t: Vec<usize>,
        k: usize,
        y: Vec<f64>,
    ) -> Result<Self> {
        let kind = OutcomeKind::detect(&y);
        let labels = (1..=k).map(|l| l.to_string()).collect();
        let ds = Dataset {
            columns,
            x,
            t,
            y,
            kind,
            k,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Overrides the detected outcome kind.
    pub fn with_outcome_kind(mut self, kind: OutcomeKind) -> Result<Self> {
        self.kind = kind;
        self.validate()?;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.k {
            return Err(Error::InvalidData(format!(
                "{} labels for {} treatment levels",
                labels.len(),
                self.k
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::InvalidData("empty dataset".into()));
        }
        if self.t.len() != n || self.x.nrows() != n {
            return Err(Error::InvalidData(format!(
                "length mismatch: x has {} rows, t {}, y {}",
                self.x.nrows(),
                self.t.len(),
                n
            )));
        }
        if self.columns.len() != self.x.ncols() {
            return Err(Error::InvalidData(format!(
                "{} column names for {} covariates",
                self.columns.len(),
                self.x.ncols()
            )));
        }
        if self.k < 2 {
            return Err(Error::InvalidData("need at least two treatment levels".into()));
        }
        let mut counts = vec![0usize; self.k];
        for (i, &ti) in self.t.iter().enumerate() {
            if ti >= self.k {
                return Err(Error::InvalidData(format!(
                    "treatment code {} out of range in row {}",
                    ti + 1,
                    i
                )));
            }
            counts[ti] += 1;
        }
        if let Some(level) = counts.iter().position(|&c| c == 0) {
            return Err(Error::EmptyLevel(level + 1));
        }
        for i in 0..n {
            if !self.y[i].is_finite() {
                return Err(Error::NonFinite { what: "outcome", row: i });
            }
            if self.x.row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: "covariate",
                    row: i,
                });
            }
        }
        if self.kind == OutcomeKind::Binary && self.y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidData(
                "binary outcome contains values other than 0/1".into(),
            ));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn t(&self) -> &[usize] {
        &self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.kind
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn level_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &ti in &self.t {
            counts[ti] += 1;
        }
        counts
    }

    /// Columns whose values are all in {0, 1}.
    pub fn binary_columns(&self) -> Vec<usize> {
        (0..self.p())
            .filter(|&j| self.x.column(j).iter().all(|&v| v == 0.0 || v == 1.0))
            .collect()
    }

    /// Rows `indices` (repeats allowed) as a new dataset. Fails if a
    /// treatment level ends up empty.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let x = DMatrix::from_fn(indices.len(), self.p(), |i, j| self.x[(indices[i], j)]);
        let t = indices.iter().map(|&i| self.t[i]).collect();
        let y = indices.iter().map(|&i| self.y[i]).collect();
        let ds = Dataset {
            columns: self.columns.clone(),
            x,
            t,
            y,
            kind: self.kind,
            k: self.k,
            labels: self.labels.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Same covariates with new treatment and outcome vectors.
    pub fn with_treatment_and_outcome(&self, t: Vec<usize>, y: Vec<f64>) -> Result<Dataset> {
        let ds = Dataset {
            columns: self.columns.clone(),
            x: self.x.clone(),
            t,
            y,
            kind: self.kind,
            k: self.k,
            labels: self.labels.clone(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_record(&self) -> DatasetRecord {
        DatasetRecord {
            columns: self.columns.clone(),
            x: (0..self.n())
                .map(|i| self.x.row(i).iter().copied().collect())
                .collect(),
            t: self.t.iter().map(|&v| v + 1).collect(),
            y: self.y.clone(),
            outcome_kind: self.kind,
            k: self.k,
            labels: self.labels.clone(),
        }
    }

    pub fn from_record(rec: DatasetRecord) -> Result<Dataset> {
        let n = rec.x.len();
        let p = rec.columns.len();
        if rec.x.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidData("ragged covariate rows".into()));
        }
        if rec.t.iter().any(|&v| v == 0) {
            return Err(Error::InvalidData("treatment codes are 1-based".into()));
        }
        let x = DMatrix::from_fn(n, p, |i, j| rec.x[i][j]);
        let t = rec.t.iter().map(|&v| v - 1).collect();
        Dataset::new(rec.columns, x, t, rec.k, rec.y)?
            .with_outcome_kind(rec.outcome_kind)?
            .with_labels(rec.labels)
    }

    pub fn from_json(text: &str) -> Result<Dataset> {
        let rec: DatasetRecord = serde_json::from_str(text)?;
        Dataset::from_record(rec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_record())?)
    }
}

/// JSON layout of a [`Dataset`]; treatment codes are 1-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub columns: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub t: Vec<usize>,
    pub y: Vec<f64>,
    pub outcome_kind: OutcomeKind,
    pub k: usize,
    pub labels: Vec<String>,
}

/// Reads an RFC-4180 CSV with a header row.
///
/// Treatment categories are sorted (numerically when every label parses as
/// a number, lexicographically otherwise) and recoded to `1..k` in that
/// order; the labels are kept on the dataset.
pub fn load_csv(
    path: impl AsRef<Path>,
    treatment_col: &str,
    outcome_col: &str,
    covariate_cols: &[String],
    kind: Option<OutcomeKind>,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let header = reader.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let t_idx = find(treatment_col)?;
    let y_idx = find(outcome_col)?;
    let x_idx = covariate_cols
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut raw_t = Vec::new();
    let mut y = Vec::new();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cell = |idx: usize| rec.get(idx).unwrap_or("").trim();
        raw_t.push(cell(t_idx).to_string());
        let yv = parse_cell(cell(y_idx), outcome_col, row)?;
        if !yv.is_finite() {
            return Err(Error::NonFinite { what: "outcome", row });
        }
        y.push(yv);
        let mut xr = Vec::with_capacity(x_idx.len());
        for (c, &idx) in covariate_cols.iter().zip(&x_idx) {
            let v = parse_cell(cell(idx), c, row)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "covariate",
                    row,
                });
            }
            xr.push(v);
        }
        xs.push(xr);
    }
    if let Some(row) = raw_t.iter().position(|s| s.is_empty()) {
        return Err(Error::Parse {
            column: treatment_col.to_string(),
            row,
            value: String::new(),
        });
    }

    let labels = sorted_labels(&raw_t);
    let t: Vec<usize> = raw_t
        .iter()
        .map(|s| labels.iter().position(|l| l == s).expect("label present"))
        .collect();
    let n = y.len();
    let x = DMatrix::from_fn(n, covariate_cols.len(), |i, j| xs[i][j]);
    let k = labels.len();
    let ds = Dataset::new(covariate_cols.to_vec(), x, t, k, y)?.with_labels(labels)?;
    match kind {
        Some(kind) => ds.with_outcome_kind(kind),
        None => Ok(ds),
    }
}

fn parse_cell(s: &str, column: &str, row: usize) -> Result<f64> {
    s.parse::<f64>().map_err(|_| Error::Parse {
        column: column.to_string(),
        row,
        value: s.to_string(),
    })
}

fn sorted_labels(raw: &[String]) -> Vec<String> {
    let uniq: BTreeSet<&String> = raw.iter().collect();
    let mut labels: Vec<String> = uniq.into_iter().cloned().collect();
    if labels.iter().all(|l| l.parse::<f64>().is_ok()) {
        labels.sort_by(|a, b| {
            let (a, b) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            a.total_cmp(&b)
        });
    }
    labels
}

/// An ordered comparison `tau_{treated, reference}` between two levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub treated: usize,
    pub reference: usize,
}

impl Pair {
    /// Zero-based levels.
    pub fn new(treated: usize, reference: usize) -> Result<Pair> {
        if treated == reference {
            return Err(Error::InvalidPair(treated + 1, reference + 1));
        }
        Ok(Pair {
            treated,
            reference,
        })
    }

    pub fn check(&self, k: usize) -> Result<()> {
        if self.treated >= k || self.reference >= k || self.treated == self.reference {
            return Err(Error::InvalidPair(self.treated + 1, self.reference + 1));
        }
        Ok(())
    }

    /// Parameter name such as `tau_21`.
    pub fn parameter(&self) -> String {
        format!("tau_{}{}", self.treated + 1, self.reference + 1)
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} vs {}", self.treated + 1, self.reference + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastSet {
    pairs: Vec<Pair>,
}

impl ContrastSet {
    pub fn new(pairs: Vec<Pair>) -> Result<ContrastSet> {
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if p.treated == p.reference {
                return Err(Error::InvalidPair(p.treated + 1, p.reference + 1));
            }
            if !seen.insert(*p) {
                return Err(Error::Config(format!("duplicate contrast {p}")));
            }
        }
        Ok(ContrastSet { pairs })
    }

    /// Every level against level 1.
    pub fn against_reference(k: usize) -> ContrastSet {
        ContrastSet {
            pairs: (1..k).map(|t| Pair { treated: t, reference: 0 }).collect(),
        }
    }

    /// All k(k-1)/2 unordered pairs, grouped by the lower level.
    pub fn all_pairs(k: usize) -> ContrastSet {
        let mut pairs = Vec::new();
        for r in 0..k {
            for t in (r + 1)..k {
                pairs.push(Pair {
                    treated: t,
                    reference: r,
                });
            }
        }
        ContrastSet { pairs }
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn check(&self, k: usize) -> Result<()> {
        self.pairs.iter().try_for_each(|p| p.check(k))
    }
}

/// One term of a design specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Term {
    Intercept,
    Main { column: String },
    Interaction { left: String, right: String },
    Square { column: String },
    /// Natural cubic (`degree = 3`) or linear (`degree = 1`) regression
    /// spline with `knots` interior knots at equally spaced quantiles.
    /// Contributes `knots + 1` columns (the linear term included).
    Spline {
        column: String,
        degree: usize,
        knots: usize,
    },
}

impl Term {
    pub fn main(c: &str) -> Term {
        Term::Main { column: c.into() }
    }
    pub fn interaction(a: &str, b: &str) -> Term {
        Term::Interaction {
            left: a.into(),
            right: b.into(),
        }
    }
    pub fn square(c: &str) -> Term {
        Term::Square { column: c.into() }
    }
    pub fn spline(c: &str, knots: usize) -> Term {
        Term::Spline {
            column: c.into(),
            degree: 3,
            knots,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DesignSpec {
    pub terms: Vec<Term>,
    pub treatment_dummies: bool,
}

impl DesignSpec {
    pub fn new(terms: Vec<Term>, treatment_dummies: bool) -> DesignSpec {
        DesignSpec {
            terms,
            treatment_dummies,
        }
    }

    /// Intercept plus a main term for every covariate.
    pub fn main_terms(columns: &[String], treatment_dummies: bool) -> DesignSpec {
        let mut terms = vec![Term::Intercept];
        terms.extend(columns.iter().map(|c| Term::main(c)));
        DesignSpec::new(terms, treatment_dummies)
    }

    /// Fixes column indices and spline knots against `data`.
    pub fn resolve(&self, data: &Dataset) -> Result<Design> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for term in &self.terms {
            let resolved = match term {
                Term::Intercept => Basis::Intercept,
                Term::Main { column } => Basis::Main(data.column_index(column)?),
                Term::Interaction { left, right } => {
                    Basis::Product(data.column_index(left)?, data.column_index(right)?)
                }
                Term::Square { column } => {
                    let j = data.column_index(column)?;
                    Basis::Product(j, j)
                }
                Term::Spline {
                    column,
                    degree,
                    knots,
                } => {
                    let j = data.column_index(column)?;
                    let values: Vec<f64> = data.x().column(j).iter().copied().collect();
                    Basis::Spline(SplineBasis::fit(column, j, &values, *degree, *knots)?)
                }
            };
            terms.push(resolved);
        }
        Ok(Design {
            terms,
            dummies: if self.treatment_dummies {
                data.k() - 1
            } else {
                0
            },
        })
    }
}

/// How treatment dummies are filled when building a design matrix.
#[derive(Debug, Clone, Copy)]
pub enum TreatmentCoding<'a> {
    Observed(&'a [usize]),
    /// Every row set to the same (counterfactual) level.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Basis {
    Intercept,
    Main(usize),
    Product(usize, usize),
    Spline(SplineBasis),
}

impl Basis {
    fn width(&self) -> usize {
        match self {
            Basis::Spline(s) => s.width(),
            _ => 1,
        }
    }
}

/// A design specification resolved against training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    terms: Vec<Basis>,
    dummies: usize,
}

impl Design {
    pub fn ncols(&self) -> usize {
        self.terms.iter().map(Basis::width).sum::<usize>() + self.dummies
    }

    /// Design matrix for covariates `x`; treatment dummies (level 1 as
    /// reference) are appended last.
    pub fn matrix(&self, x: &DMatrix<f64>, coding: TreatmentCoding<'_>) -> DMatrix<f64> {
        let n = x.nrows();
        let mut out = DMatrix::zeros(n, self.ncols());
        let mut col = 0;
        for term in &self.terms {
            match term {
                Basis::Intercept => out.column_mut(col).fill(1.0),
                Basis::Main(j) => out.column_mut(col).copy_from(&x.column(*j)),
                Basis::Product(a, b) => {
                    for i in 0..n {
                        out[(i, col)] = x[(i, *a)] * x[(i, *b)];
                    }
                }
                Basis::Spline(s) => {
                    for i in 0..n {
                        s.eval(x[(i, s.column)], |c, v| out[(i, col + c)] = v);
                    }
                }
            }
            col += term.width();
        }
        if self.dummies > 0 {
            for i in 0..n {
                let level = match coding {
                    TreatmentCoding::Observed(t) => t[i],
                    TreatmentCoding::Fixed(l) => l,
                };
                if level > 0 {
                    out[(i, col + level - 1)] = 1.0;
                }
            }
        }
        out
    }
}

/// Resolves `spec` on `data` and builds its design with the observed
/// treatment.
pub fn expand_design(data: &Dataset, spec: &DesignSpec) -> Result<DMatrix<f64>> {
    let design = spec.resolve(data)?;
    Ok(design.matrix(data.x(), TreatmentCoding::Observed(data.t())))
}

#[derive(Debug, Clone, PartialEq)]
struct SplineBasis {
    column: usize,
    degree: usize,
    /// Boundary knots first and last.
    knots: Vec<f64>,
}

impl SplineBasis {
    fn fit(name: &str, column: usize, values: &[f64], degree: usize, interior: usize) -> Result<Self> {
        if degree != 1 && degree != 3 {
            return Err(Error::InvalidDesign(format!(
                "spline degree {degree} on `{name}` (supported: 1, 3)"
            )));
        }
        if interior == 0 {
            return Err(Error::InvalidDesign(format!("spline on `{name}` needs at least one knot")));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct = sorted.clone();
        distinct.dedup();
        if distinct.len() < interior + 2 {
            return Err(Error::InvalidDesign(format!(
                "spline on `{name}`: {} distinct values for {} knots",
                distinct.len(),
                interior + 2
            )));
        }
        let mut knots = Vec::with_capacity(interior + 2);
        for q in 0..(interior + 2) {
            knots.push(quantile_sorted(&sorted, q as f64 / (interior + 1) as f64));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidDesign(format!(
                "spline on `{name}`: quantile knots are not distinct"
            )));
        }
        Ok(SplineBasis {
            column,
            degree,
            knots,
        })
    }

    fn width(&self) -> usize {
        self.knots.len() - 1
    }

    fn eval(&self, x: f64, mut put: impl FnMut(usize, f64)) {
        put(0, x);
        let kk = self.knots.len();
        if self.degree == 1 {
            for (c, &knot) in self.knots[1..kk - 1].iter().enumerate() {
                put(c + 1, (x - knot).max(0.0));
            }
            return;
        }
        // Truncated-power natural cubic basis, scaled by the squared range.
        let last = self.knots[kk - 1];
        let scale = (last - self.knots[0]).powi(2);
        let cube = |v: f64| v.max(0.0).powi(3);
        let d = |j: usize| (cube(x - self.knots[j]) - cube(x - last)) / (last - self.knots[j]);
        let d_last = d(kk - 2);
        for j in 0..kk - 2 {
            put(j + 1, (d(j) - d_last) / scale);
        }
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
