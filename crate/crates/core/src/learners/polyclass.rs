//! Adaptive multinomial regression on spline bases.
//!
//! Starts from main terms and adds, by largest Rao score statistic per
//! degree of freedom, the nonlinear natural-spline block of each continuous
//! covariate, its linear interaction with each binary covariate, and the
//! spline-by-binary interaction (only once both parents are in). The final
//! model is the one with the smallest BIC along the addition path.

use nalgebra::{DMatrix, DVector};

use super::{continuous_columns, TreatmentModel, SPLINE_KNOTS};
use crate::error::Result;
use crate::glm::{self, MultinomialFit};
use crate::tabular::{Dataset, Design, DesignSpec, Term, TreatmentCoding};

#[derive(Debug, Clone)]
enum Block {
    Spline { col: usize, basis: Design },
    ByBinary { col: usize, binary: usize },
    SplineByBinary { col: usize, binary: usize, basis: Design },
}

impl Block {
    fn width(&self) -> usize {
        match self {
            Block::Spline { basis, .. } | Block::SplineByBinary { basis, .. } => basis.ncols() - 1,
            Block::ByBinary { .. } => 1,
        }
    }

    fn columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Block::Spline { basis, .. } => nonlinear_part(basis, x),
            Block::ByBinary { col, binary } => {
                DMatrix::from_fn(x.nrows(), 1, |i, _| x[(i, *col)] * x[(i, *binary)])
            }
            Block::SplineByBinary { binary, basis, .. } => {
                let mut m = nonlinear_part(basis, x);
                for i in 0..x.nrows() {
                    let b = x[(i, *binary)];
                    m.row_mut(i).scale_mut(b);
                }
                m
            }
        }
    }

    fn name(&self, cols: &[String]) -> String {
        match self {
            Block::Spline { col, .. } => format!("spline({})", cols[*col]),
            Block::ByBinary { col, binary } => format!("{}:{}", cols[*col], cols[*binary]),
            Block::SplineByBinary { col, binary, .. } => {
                format!("spline({}):{}", cols[*col], cols[*binary])
            }
        }
    }

    fn requires(&self) -> Option<(usize, usize)> {
        match self {
            Block::SplineByBinary { col, binary, .. } => Some((*col, *binary)),
            _ => None,
        }
    }
}

fn nonlinear_part(basis: &Design, x: &DMatrix<f64>) -> DMatrix<f64> {
    let full = basis.matrix(x, TreatmentCoding::Fixed(0));
    full.columns(1, full.ncols() - 1).into_owned()
}

#[derive(Debug, Clone)]
pub struct PolyclassFit {
    base: Design,
    blocks: Vec<Block>,
    selected: Vec<usize>,
    names: Vec<String>,
    fit: MultinomialFit,
    /// BIC of each model on the addition path (main terms first).
    pub bic_path: Vec<f64>,
}

impl PolyclassFit {
    /// Names of the blocks in the selected model.
    pub fn selected(&self) -> Vec<String> {
        self.selected.iter().map(|&b| self.names[b].clone()).collect()
    }

    fn design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assemble(&self.base, &self.blocks, &self.selected, x)
    }
}

impl TreatmentModel for PolyclassFit {
    fn probs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        glm::predict_probs(&self.fit, &self.design(x))
    }
}

fn assemble(base: &Design, blocks: &[Block], active: &[usize], x: &DMatrix<f64>) -> DMatrix<f64> {
    let b = base.matrix(x, TreatmentCoding::Fixed(0));
    let extra: Vec<DMatrix<f64>> = active.iter().map(|&i| blocks[i].columns(x)).collect();
    let width = b.ncols() + extra.iter().map(|m| m.ncols()).sum::<usize>();
    let mut out = DMatrix::zeros(x.nrows(), width);
    out.columns_mut(0, b.ncols()).copy_from(&b);
    let mut c = b.ncols();
    for m in extra {
        out.columns_mut(c, m.ncols()).copy_from(&m);
        c += m.ncols();
    }
    out
}

/// Rao score statistic for adding `extra` columns to a model whose fitted
/// (unclipped) probabilities are `probs` on design `current`.
fn rao_statistic(current: &DMatrix<f64>, extra: &DMatrix<f64>, t: &[usize], probs: &DMatrix<f64>) -> f64 {
    let n = current.nrows();
    let (qc, qe) = (current.ncols(), extra.ncols());
    let mut aug = DMatrix::zeros(n, qc + qe);
    aug.columns_mut(0, qc).copy_from(current);
    aug.columns_mut(qc, qe).copy_from(extra);
    let (grad, hess) = glm::multinomial_grad_hess(&aug, t, probs);
    let q = qc + qe;
    // The score is zero on the already-fitted parameters.
    let mut g = DVector::zeros(grad.len());
    for l in 0..probs.ncols() - 1 {
        for j in qc..q {
            g[l * q + j] = grad[l * q + j];
        }
    }
    match glm::solve_ridge(&hess, &g) {
        Some(s) => g.dot(&s).max(0.0),
        None => 0.0,
    }
}

fn unclipped_probs(fit: &MultinomialFit, design: &DMatrix<f64>) -> DMatrix<f64> {
    glm::softmax_rows(&(design * fit.coefficients.transpose()))
}

pub fn fit_polyclass(data: &Dataset) -> Result<PolyclassFit> {
    let cols = data.columns();
    let base = DesignSpec::main_terms(cols, false).resolve(data)?;
    let binary = data.binary_columns();

    let mut blocks = Vec::new();
    for col in continuous_columns(data, SPLINE_KNOTS + 4) {
        let Ok(basis) = DesignSpec::new(vec![Term::spline(&cols[col], SPLINE_KNOTS)], false).resolve(data)
        else {
            continue;
        };
        blocks.push(Block::Spline {
            col,
            basis: basis.clone(),
        });
        for &b in &binary {
            blocks.push(Block::ByBinary { col, binary: b });
            blocks.push(Block::SplineByBinary {
                col,
                binary: b,
                basis: basis.clone(),
            });
        }
    }
    let names: Vec<String> = blocks.iter().map(|b| b.name(cols)).collect();

    let n = data.n() as f64;
    let k = data.k();
    let t = data.t();
    let bic = |fit: &MultinomialFit, design: &DMatrix<f64>| {
        let ll = glm::multinomial_loglik(t, &unclipped_probs(fit, design));
        -2.0 * ll + n.ln() * ((k - 1) * design.ncols()) as f64
    };

    let mut active: Vec<usize> = Vec::new();
    let mut design = assemble(&base, &blocks, &active, data.x());
    let mut fit = glm::fit_multinomial(&design, t, k)?;
    let mut bic_path = vec![bic(&fit, &design)];
    let mut best = (bic_path[0], active.clone(), fit.clone());

    loop {
        let eligible: Vec<usize> = (0..blocks.len())
            .filter(|b| !active.contains(b))
            .filter(|&b| match blocks[b].requires() {
                None => true,
                Some((col, binary)) => {
                    let has = |pred: &dyn Fn(&Block) -> bool| active.iter().any(|&a| pred(&blocks[a]));
                    has(&|bl| matches!(bl, Block::Spline { col: c, .. } if *c == col))
                        && has(&|bl| matches!(bl, Block::ByBinary { col: c, binary: bb } if *c == col && *bb == binary))
                }
            })
            .collect();
        if eligible.is_empty() {
            break;
        }
        let probs = unclipped_probs(&fit, &design);
        let pick = eligible
            .iter()
            .map(|&b| {
                let stat = rao_statistic(&design, &blocks[b].columns(data.x()), t, &probs);
                (b, stat / blocks[b].width() as f64)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(b, _)| b)
            .expect("non-empty");
        active.push(pick);
        design = assemble(&base, &blocks, &active, data.x());
        fit = glm::fit_multinomial(&design, t, k)?;
        let b = bic(&fit, &design);
        bic_path.push(b);
        if b < best.0 {
            best = (b, active.clone(), fit.clone());
        }
    }

    let (_, selected, fit) = best;
    Ok(PolyclassFit {
        base,
        blocks,
        selected,
        names,
        fit,
        bic_path,
    })
}
