//! Discrete cause-specific hazards and the exact product-limit maps to
//! survival and absolute-risk curves.
//!
//! With hazards constant on grid intervals,
//! `S(s_m) = Π_{m'≤m} (1 − Σ_l λ_l(m'))` and
//! `F_l(s_m) = Σ_{m'≤m} S(s_{m'-1}) λ_l(m')`, so `S + Σ_l F_l = 1` holds at every
//! grid point up to round-off.

use serde::Serialize;

use crate::data::TimeGrid;
use crate::error::{Error, Result};

pub const DEFAULT_CLAMP_MARGIN: f64 = 1e-6;

/// Hazards indexed `[arm][subject][interval][cause]`, both arms always present.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardTensor {
    n_subjects: usize,
    n_intervals: usize,
    n_causes: usize,
    values: Vec<f64>,
    clamp_margin: f64,
}

impl HazardTensor {
    pub fn zeros(n_subjects: usize, n_intervals: usize, n_causes: usize) -> Self {
        Self {
            n_subjects,
            n_intervals,
            n_causes,
            values: vec![0.0; 2 * n_subjects * n_intervals * n_causes],
            clamp_margin: DEFAULT_CLAMP_MARGIN,
        }
    }

    /// Builds a tensor from a closure `(arm, subject, interval, cause) -> λ`,
    /// `cause` being 0-based.
    pub fn from_fn(
        n_subjects: usize,
        n_intervals: usize,
        n_causes: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut h = Self::zeros(n_subjects, n_intervals, n_causes);
        for a in 0..2 {
            for i in 0..n_subjects {
                for q in 0..n_intervals {
                    for l in 0..n_causes {
                        let idx = h.index(a, i, q, l);
                        h.values[idx] = f(a, i, q, l);
                    }
                }
            }
        }
        h
    }

    pub fn with_clamp_margin(mut self, margin: f64) -> Self {
        self.clamp_margin = margin;
        self
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    pub fn n_causes(&self) -> usize {
        self.n_causes
    }

    pub fn clamp_margin(&self) -> f64 {
        self.clamp_margin
    }

    #[inline]
    fn index(&self, arm: usize, subject: usize, interval: usize, cause: usize) -> usize {
        ((arm * self.n_subjects + subject) * self.n_intervals + interval) * self.n_causes + cause
    }

    #[inline]
    pub fn get(&self, arm: usize, subject: usize, interval: usize, cause: usize) -> f64 {
        self.values[self.index(arm, subject, interval, cause)]
    }

    pub fn set(&mut self, arm: usize, subject: usize, interval: usize, cause: usize, value: f64) {
        let idx = self.index(arm, subject, interval, cause);
        self.values[idx] = value;
    }

    /// Hazards of one (arm, subject), laid out `[interval][cause]`.
    pub fn row(&self, arm: usize, subject: usize) -> &[f64] {
        let start = self.index(arm, subject, 0, 0);
        &self.values[start..start + self.n_intervals * self.n_causes]
    }

    pub fn row_mut(&mut self, arm: usize, subject: usize) -> &mut [f64] {
        let start = self.index(arm, subject, 0, 0);
        let len = self.n_intervals * self.n_causes;
        &mut self.values[start..start + len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn validate(&self) -> Result<()> {
        let upper = 1.0 - self.clamp_margin;
        for (k, chunk) in self.values.chunks(self.n_causes).enumerate() {
            let mut total = 0.0;
            for &v in chunk {
                if !(0.0..=upper).contains(&v) {
                    return Err(Error::InvalidHazards(format!("hazard {v} at cell {k} outside [0, {upper}]")));
                }
                total += v;
            }
            if total > upper {
                return Err(Error::InvalidHazards(format!("total hazard {total} at cell {k} exceeds {upper}")));
            }
        }
        Ok(())
    }

    /// Forces every cell into bounds, scaling the causes of a cell down
    /// proportionally when their total is too large. Returns how many cells moved.
    pub fn clamp_in_place(&mut self) -> usize {
        let upper = 1.0 - self.clamp_margin;
        let mut hits = 0;
        for chunk in self.values.chunks_mut(self.n_causes) {
            hits += clamp_cell(chunk, upper) as usize;
        }
        hits
    }
}

/// Clamps one interval's cause hazards; returns whether a bound was active.
pub(crate) fn clamp_cell(cell: &mut [f64], upper: f64) -> bool {
    let mut hit = false;
    let mut total = 0.0;
    for v in cell.iter_mut() {
        if !v.is_finite() || *v < 0.0 {
            *v = 0.0;
            hit = true;
        } else if *v > upper {
            *v = upper;
            hit = true;
        }
        total += *v;
    }
    if total > upper {
        // shave a few ulps so the rescaled sum cannot round above the bound
        let scale = upper / total * (1.0 - 4.0 * f64::EPSILON);
        for v in cell.iter_mut() {
            *v *= scale;
        }
        hit = true;
    }
    hit
}

/// Survival and absolute-risk curves of one hazard row (`[interval][cause]`),
/// written into `survival` (length `M+1`) and `risk` (`[point][cause]`, length
/// `(M+1)·J`). Index 0 is time zero.
pub(crate) fn curves_into(row: &[f64], n_causes: usize, survival: &mut [f64], risk: &mut [f64]) {
    let m = row.len() / n_causes;
    survival[0] = 1.0;
    risk[..n_causes].fill(0.0);
    for q in 0..m {
        let cell = &row[q * n_causes..(q + 1) * n_causes];
        let s_prev = survival[q];
        let mut total = 0.0;
        for l in 0..n_causes {
            total += cell[l];
            risk[(q + 1) * n_causes + l] = risk[q * n_causes + l] + s_prev * cell[l];
        }
        survival[q + 1] = s_prev * (1.0 - total);
    }
}

fn check_row(row: &[f64], n_causes: usize) -> Result<()> {
    for (q, cell) in row.chunks(n_causes).enumerate() {
        let total: f64 = cell.iter().sum();
        if cell.iter().any(|&v| !(v >= 0.0)) || total >= 1.0 {
            return Err(Error::InvalidHazards(format!("interval {q}: total hazard {total} not in [0, 1)")));
        }
    }
    Ok(())
}

/// `S(s_m)` for `m = 0..=M`, with `S(s_0) = 1`.
pub fn survival_curve(hazards: &HazardTensor, arm: usize, subject: usize) -> Result<Vec<f64>> {
    let row = hazards.row(arm, subject);
    let j = hazards.n_causes();
    check_row(row, j)?;
    let mut s = vec![0.0; hazards.n_intervals() + 1];
    let mut f = vec![0.0; (hazards.n_intervals() + 1) * j];
    curves_into(row, j, &mut s, &mut f);
    Ok(s)
}

/// `F_l(s_m)` for `m = 0..=M`; `cause` is 1-based.
pub fn absolute_risk_curve(hazards: &HazardTensor, arm: usize, subject: usize, cause: usize) -> Result<Vec<f64>> {
    let j = hazards.n_causes();
    if cause == 0 || cause > j {
        return Err(Error::InvalidHazards(format!("cause {cause} outside 1..={j}")));
    }
    let row = hazards.row(arm, subject);
    check_row(row, j)?;
    let mut s = vec![0.0; hazards.n_intervals() + 1];
    let mut f = vec![0.0; (hazards.n_intervals() + 1) * j];
    curves_into(row, j, &mut s, &mut f);
    Ok(f.chunks(j).map(|c| c[cause - 1]).collect())
}

/// Survival and absolute-risk curves for every arm and subject.
#[derive(Debug, Clone, Serialize)]
pub struct RiskCurves {
    n_subjects: usize,
    n_points: usize,
    n_causes: usize,
    survival: Vec<f64>,
    absolute_risk: Vec<f64>,
}

impl RiskCurves {
    pub fn compute(hazards: &HazardTensor) -> Result<Self> {
        let (n, m, j) = (hazards.n_subjects(), hazards.n_intervals(), hazards.n_causes());
        let p = m + 1;
        let mut survival = vec![0.0; 2 * n * p];
        let mut absolute_risk = vec![0.0; 2 * n * p * j];
        for a in 0..2 {
            for i in 0..n {
                let row = hazards.row(a, i);
                check_row(row, j)?;
                let k = a * n + i;
                curves_into(row, j, &mut survival[k * p..(k + 1) * p], &mut absolute_risk[k * p * j..(k + 1) * p * j]);
            }
        }
        Ok(Self { n_subjects: n, n_points: p, n_causes: j, survival, absolute_risk })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn survival(&self, arm: usize, subject: usize) -> &[f64] {
        let k = arm * self.n_subjects + subject;
        &self.survival[k * self.n_points..(k + 1) * self.n_points]
    }

    /// `F_l(s_point)`, `cause` 1-based.
    pub fn absolute_risk(&self, arm: usize, subject: usize, point: usize, cause: usize) -> f64 {
        let k = arm * self.n_subjects + subject;
        self.absolute_risk[(k * self.n_points + point) * self.n_causes + cause - 1]
    }
}

/// Zero-based interval index `q` with `t ∈ (s_q, s_{q+1}]`.
pub fn interval_lookup(grid: &TimeGrid, t: f64) -> Result<usize> {
    let tau = grid.horizon();
    let times = grid.times();
    if !(t > 0.0 && t <= tau) || t > times[times.len() - 1] {
        return Err(Error::TimeOutOfRange { time: t, horizon: tau });
    }
    Ok(times.partition_point(|&s| s < t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tensor(rows: &[&[f64]], j: usize) -> HazardTensor {
        let m = rows[0].len() / j;
        HazardTensor::from_fn(1, m, j, |_, _, q, l| rows[0][q * j + l])
    }

    #[test]
    fn zero_hazards_give_unit_survival() {
        let h = HazardTensor::zeros(1, 3, 2);
        assert_eq!(survival_curve(&h, 0, 0).unwrap(), vec![1.0; 4]);
        assert_eq!(absolute_risk_curve(&h, 0, 0, 2).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn single_cause_product_limit() {
        let h = tensor(&[&[0.1, 0.2]], 1);
        let s = survival_curve(&h, 1, 0).unwrap();
        assert_abs_diff_eq!(s[1], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s[2], 0.72, epsilon = 1e-15);
        let f = absolute_risk_curve(&h, 1, 0, 1).unwrap();
        for m in 0..3 {
            assert_abs_diff_eq!(f[m], 1.0 - s[m], epsilon = 1e-15);
        }
    }

    #[test]
    fn two_cause_partition() {
        // cause 1 = (0.1, 0.1), cause 2 = (0, 0.1)
        let h = tensor(&[&[0.1, 0.0, 0.1, 0.1]], 2);
        let s = survival_curve(&h, 0, 0).unwrap();
        assert_abs_diff_eq!(s[1], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s[2], 0.72, epsilon = 1e-15);
        let f1 = absolute_risk_curve(&h, 0, 0, 1).unwrap();
        let f2 = absolute_risk_curve(&h, 0, 0, 2).unwrap();
        assert_abs_diff_eq!(f1[1], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(f1[2], 0.19, epsilon = 1e-15);
        assert_abs_diff_eq!(f1[2] + f2[2] + s[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_total_hazard_of_one() {
        let h = tensor(&[&[0.6, 0.4]], 2);
        assert!(survival_curve(&h, 0, 0).is_err());
    }

    #[test]
    fn interval_lookup_boundaries() {
        let g = TimeGrid::from_times(vec![1.0, 2.0, 3.0], 3.0).unwrap();
        assert_eq!(interval_lookup(&g, 1.0).unwrap(), 0);
        assert_eq!(interval_lookup(&g, 0.5).unwrap(), 0);
        assert_eq!(interval_lookup(&g, 2.5).unwrap(), 2);
        assert!(interval_lookup(&g, 3.5).is_err());
        assert!(interval_lookup(&g, 0.0).is_err());
    }

    #[test]
    fn clamp_scales_excess_total() {
        let mut cell = [0.7, 0.7];
        assert!(clamp_cell(&mut cell, 1.0 - 1e-6));
        assert!(cell.iter().sum::<f64>() <= 1.0 - 1e-6 + 1e-15);
        let mut ok = [0.1, 0.2];
        assert!(!clamp_cell(&mut ok, 1.0 - 1e-6));
    }

    fn arb_rows() -> impl Strategy<Value = (usize, Vec<f64>)> {
        (1usize..4, 1usize..30).prop_flat_map(|(j, m)| {
            (Just(j), proptest::collection::vec(0.0f64..1.0, m * j)).prop_map(move |(j, raw)| {
                // scale each interval so its total stays below one
                let mut v = raw;
                for cell in v.chunks_mut(j) {
                    let t: f64 = cell.iter().sum::<f64>() + 1e-3;
                    let target = 0.999 * t.min(1.0);
                    for x in cell.iter_mut() {
                        *x *= target / t;
                    }
                }
                (j, v)
            })
        })
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_monotone((j, row) in arb_rows()) {
            let m = row.len() / j;
            let h = HazardTensor::from_fn(1, m, j, |_, _, q, l| row[q * j + l]);
            let curves = RiskCurves::compute(&h).unwrap();
            let s = curves.survival(0, 0);
            let tol = 8.0 * f64::EPSILON * m as f64;
            for p in 0..=m {
                let total: f64 = s[p] + (1..=j).map(|l| curves.absolute_risk(0, 0, p, l)).sum::<f64>();
                prop_assert!((total - 1.0).abs() <= tol, "sum {total} at {p}");
                if p > 0 {
                    prop_assert!(s[p] <= s[p - 1]);
                    for l in 1..=j {
                        prop_assert!(curves.absolute_risk(0, 0, p, l) >= curves.absolute_risk(0, 0, p - 1, l));
                    }
                }
            }
            if j == 1 {
                for p in 0..=m {
                    prop_assert!((curves.absolute_risk(0, 0, p, 1) - (1.0 - s[p])).abs() <= tol);
                }
            }
        }
    }
}
