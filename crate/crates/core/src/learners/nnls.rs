use nalgebra::{DMatrix, DVector};

/// Non-negative least squares, `min ||A w - b||` subject to `w >= 0`
/// (Lawson-Hanson active set).
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let m = a.ncols();
    let mut w = DVector::zeros(m);
    let mut passive = vec![false; m];
    let tol = 1e-12 * a.norm().max(1.0) * b.norm().max(1.0);

    for _ in 0..(3 * m + 10) {
        let grad = a.tr_mul(&(b - a * &w));
        let candidate = (0..m)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;

        loop {
            let idx: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
            let z = restricted_lstsq(a, b, &idx);
            if z.iter().all(|&v| v > 0.0) {
                w.fill(0.0);
                for (&j, &v) in idx.iter().zip(z.iter()) {
                    w[j] = v;
                }
                break;
            }
            // Step towards z until a passive coefficient hits zero.
            let mut alpha = 1.0f64;
            for (&j, &v) in idx.iter().zip(z.iter()) {
                if v <= 0.0 {
                    alpha = alpha.min(w[j] / (w[j] - v));
                }
            }
            for (&j, &v) in idx.iter().zip(z.iter()) {
                w[j] += alpha * (v - w[j]);
                if w[j] <= tol {
                    w[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    w
}

fn restricted_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    let sub = DMatrix::from_fn(a.nrows(), idx.len(), |i, c| a[(i, idx[c])]);
    let ata = sub.tr_mul(&sub);
    let atb = sub.tr_mul(b);
    crate::glm::solve_ridge(&ata, &atb).unwrap_or_else(|| DVector::zeros(idx.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_solution_when_positive() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let w = nnls(&a, &b);
        assert!((w[0] - 1.0).abs() < 1e-10 && (w[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn negative_coefficient_clamped() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        // Least squares would put a negative weight on column 0.
        let b = DVector::from_column_slice(&[0.0, 2.0, 4.0]);
        let w = nnls(&a, &b);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert_eq!(w[0], 0.0);
        // Optimal single-column fit on column 1.
        let c1 = a.column(1);
        let best = c1.dot(&b) / c1.dot(&c1);
        assert!((w[1] - best).abs() < 1e-10);
    }

    #[test]
    fn all_zero_when_target_opposes_columns() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let b = DVector::from_column_slice(&[-1.0, -2.0]);
        assert_eq!(nnls(&a, &b)[0], 0.0);
    }
}
