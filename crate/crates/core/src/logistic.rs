//! Ridge-penalized logistic regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};

pub(crate) struct LogisticFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
}

#[inline]
pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fits `P(y = 1 | x) = expit(xᵀβ)` on a row-major design with `p` columns,
/// penalizing `ridge · ‖β‖²/2`.
pub(crate) fn fit_logistic(design: &[f64], p: usize, y: &[f64], ridge: f64, max_iter: usize) -> LogisticFit {
    debug_assert_eq!(design.len(), y.len() * p);
    let mut beta = vec![0.0; p];
    let mut converged = false;
    let mut hess = vec![0.0; p * p];
    let mut grad = vec![0.0; p];
    for _ in 0..max_iter {
        hess.fill(0.0);
        grad.fill(0.0);
        for (row, &yi) in design.chunks_exact(p).zip(y) {
            let eta: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
            let mu = expit(eta);
            let w = (mu * (1.0 - mu)).max(1e-12);
            let r = yi - mu;
            for a in 0..p {
                let xa = row[a];
                if xa == 0.0 {
                    continue;
                }
                grad[a] += xa * r;
                let wa = w * xa;
                for b in a..p {
                    hess[a * p + b] += wa * row[b];
                }
            }
        }
        for a in 0..p {
            grad[a] -= ridge * beta[a];
            hess[a * p + a] += ridge;
            for b in 0..a {
                hess[a * p + b] = hess[b * p + a];
            }
        }
        let h = DMatrix::from_row_slice(p, p, &hess);
        let g = DVector::from_column_slice(&grad);
        let Some(step) = h.cholesky().map(|c| c.solve(&g)) else {
            break;
        };
        let mut max_change: f64 = 0.0;
        for a in 0..p {
            // damp very large Newton steps while far from the optimum
            let s = step[a].clamp(-5.0, 5.0);
            beta[a] += s;
            max_change = max_change.max(s.abs());
        }
        if beta.iter().any(|b| !b.is_finite()) {
            break;
        }
        if max_change < 1e-8 {
            converged = true;
            break;
        }
    }
    LogisticFit { coefficients: beta, converged }
}
