//! Stratified proportional hazards regression on grouped (discrete) event
//! times: Breslow partial likelihood with a ridge penalty, and one Breslow
//! baseline per stratum.

use nalgebra::{DMatrix, DVector};

pub(crate) struct CoxFit {
    pub coefficients: Vec<f64>,
    /// Per stratum, baseline hazard increment per interval, `d_q / Σ_{at risk} exp(xᵀβ)`.
    pub baseline: Vec<Vec<f64>>,
    pub converged: bool,
}

struct Moments {
    loglik: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
    s0: Vec<f64>,
    deaths: Vec<f64>,
}

/// Subject `i` is at risk in intervals `0..positions[i]` and has an event in
/// interval `positions[i] − 1` when `event[i]`.
fn moments(x: &[f64], p: usize, positions: &[usize], event: &[bool], subset: &[usize], m: usize, beta: &[f64]) -> Moments {
    let mut by_end: Vec<Vec<usize>> = vec![Vec::new(); m + 1];
    for &i in subset {
        by_end[positions[i]].push(i);
    }
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; p * p];
    let mut out = Moments { loglik: 0.0, grad: vec![0.0; p], hess: vec![0.0; p * p], s0: vec![0.0; m], deaths: vec![0.0; m] };
    for end in (1..=m).rev() {
        let mut d = 0.0;
        let mut xsum = vec![0.0; p];
        for &i in &by_end[end] {
            let xi = &x[i * p..(i + 1) * p];
            let eta: f64 = xi.iter().zip(beta).map(|(a, b)| a * b).sum();
            let r = eta.exp();
            s0 += r;
            for a in 0..p {
                s1[a] += r * xi[a];
                for b in a..p {
                    s2[a * p + b] += r * xi[a] * xi[b];
                }
            }
            if event[i] {
                d += 1.0;
                out.loglik += eta;
                xsum.iter_mut().zip(xi).for_each(|(s, v)| *s += v);
            }
        }
        let q = end - 1;
        out.s0[q] = s0;
        out.deaths[q] = d;
        if d > 0.0 {
            out.loglik -= d * s0.ln();
            for a in 0..p {
                out.grad[a] += xsum[a] - d * s1[a] / s0;
                for b in a..p {
                    out.hess[a * p + b] += d * (s2[a * p + b] / s0 - s1[a] * s1[b] / (s0 * s0));
                }
            }
        }
    }
    out
}

/// Penalized stratified log partial likelihood with its gradient and
/// (negative) Hessian; also returns each stratum's moments.
#[allow(clippy::too_many_arguments)]
fn stratified(x: &[f64], p: usize, positions: &[usize], event: &[bool], strata: &[Vec<usize>], m: usize, beta: &[f64], ridge: f64) -> (Moments, Vec<Moments>) {
    let parts: Vec<Moments> = strata.iter().map(|sub| moments(x, p, positions, event, sub, m, beta)).collect();
    let mut total = Moments { loglik: 0.0, grad: vec![0.0; p], hess: vec![0.0; p * p], s0: Vec::new(), deaths: Vec::new() };
    for part in &parts {
        total.loglik += part.loglik;
        total.grad.iter_mut().zip(&part.grad).for_each(|(a, b)| *a += b);
        total.hess.iter_mut().zip(&part.hess).for_each(|(a, b)| *a += b);
    }
    for a in 0..p {
        total.loglik -= 0.5 * ridge * beta[a] * beta[a];
        total.grad[a] -= ridge * beta[a];
        total.hess[a * p + a] += ridge;
        for b in 0..a {
            total.hess[a * p + b] = total.hess[b * p + a];
        }
    }
    (total, parts)
}

/// `strata[i]` assigns subject `i` to one of `n_strata` baseline strata.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_cox(
    x: &[f64],
    p: usize,
    positions: &[usize],
    event: &[bool],
    strata: &[usize],
    n_strata: usize,
    m: usize,
    ridge: f64,
    max_iter: usize,
) -> CoxFit {
    let groups: Vec<Vec<usize>> = (0..n_strata).map(|k| (0..strata.len()).filter(|&i| strata[i] == k).collect()).collect();
    let mut beta = vec![0.0; p];
    let mut cur = stratified(x, p, positions, event, &groups, m, &beta, ridge);
    let mut converged = false;
    for _ in 0..max_iter {
        let h = DMatrix::from_row_slice(p, p, &cur.0.hess);
        let Some(step) = h.cholesky().map(|c| c.solve(&DVector::from_column_slice(&cur.0.grad))) else {
            break;
        };
        let step: Vec<f64> = step.iter().map(|s| s.clamp(-5.0, 5.0)).collect();
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let next = stratified(x, p, positions, event, &groups, m, &trial, ridge);
            if next.0.loglik.is_finite() && next.0.loglik >= cur.0.loglik - 1e-12 {
                beta = trial;
                cur = next;
                accepted = true;
                break;
            }
            scale /= 2.0;
        }
        let change = step.iter().fold(0.0f64, |acc, s| acc.max((scale * s).abs()));
        // a step that cannot improve the likelihood means we sit at the optimum
        if !accepted || change < 1e-8 {
            converged = true;
            break;
        }
    }
    let baseline = cur
        .1
        .iter()
        .map(|part| part.deaths.iter().zip(&part.s0).map(|(&d, &s)| if s > 0.0 { d / s } else { 0.0 }).collect())
        .collect();
    CoxFit { coefficients: beta, baseline, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_model_baseline_is_nelson_aalen() {
        // one binary covariate with no effect in the data: same event pattern in both groups
        let positions = [1, 2, 3, 1, 2, 3];
        let event = [true, false, true, true, false, true];
        let x = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let fit = fit_cox(&x, 1, &positions, &event, &[0; 6], 1, 3, 0.0, 50);
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-8);
        let expected = [2.0 / 6.0, 0.0, 2.0 / 2.0];
        for (b, e) in fit.baseline[0].iter().zip(expected) {
            assert!((b - e).abs() < 1e-8, "{b} vs {e}");
        }
    }

    #[test]
    fn risk_set_equation_holds_at_every_interval() {
        let positions = [1, 2, 2, 3, 4, 4, 1, 3];
        let event = [true, true, false, true, false, true, false, true];
        let x = [0.5, -0.2, 1.0, 0.3, -1.0, 0.8, 0.1, -0.4];
        let strata = [0, 1, 0, 1, 0, 1, 0, 1];
        let fit = fit_cox(&x, 1, &positions, &event, &strata, 2, 4, 1e-3, 100);
        for k in 0..2 {
            for q in 0..4 {
                let members = (0..8).filter(|&i| strata[i] == k);
                let expected: f64 =
                    members.clone().filter(|&i| positions[i] > q).map(|i| fit.baseline[k][q] * (x[i] * fit.coefficients[0]).exp()).sum();
                let observed = members.filter(|&i| positions[i] == q + 1 && event[i]).count() as f64;
                assert!((expected - observed).abs() < 1e-10);
            }
        }
    }
}
