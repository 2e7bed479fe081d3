//! Clever covariates, efficient influence function values and plug-in
//! estimates for stacked absolute-risk / survival targets.
//!
//! A component targets `E[Q(t_k | a, L)]` where `Q` is either a cause-specific
//! absolute risk `F_j` or the event-free survival `S = 1 − Σ_j F_j`. Writing
//! `Q = c_0 + Σ_j c_j F_j`, the clever covariate on interval `(s_{p-1}, s_p]`
//! for cause `l` is
//!
//! ```text
//! h_l = 1{A = a} / (π(a|L) S^c(s_p−|a,L)) · 1{s_p ≤ t_k}
//!       · [ c_l − Σ_j c_j (F_j(t_k) − F_j(s_p)) / S(s_p) ]
//! ```
//!
//! which for `Q = F_j` is `1 − ΔF_j/S` when `l = j` and `−ΔF_j/S` otherwise.
//! The EIF is `Σ_l Σ_p h_l (dN_l − Y λ_l) + Q(t_k|a,L) − ψ`.
//!
//! [`eif_matrix`] evaluates all components with prefix sums over the grid, in
//! `O(n·M·J + n·d)`; [`clever_covariate`] is the literal elementwise formula.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TimeGrid};
use crate::error::{Error, Result};
use crate::hazard::{curves_into, HazardTensor, RiskCurves};
use crate::nuisance::{CensoringSurvival, NuisanceFit};

pub const DEFAULT_SURVIVAL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    /// Absolute risk of the given cause (1-based).
    Risk(usize),
    Survival,
}

impl Quantity {
    /// `(c_0, c_j)` with `Q = c_0 + Σ_j c_j F_j`.
    fn coefficients(&self, num_causes: usize) -> (f64, Vec<f64>) {
        match *self {
            Quantity::Risk(j) => {
                let mut c = vec![0.0; num_causes];
                c[j - 1] = 1.0;
                (0.0, c)
            }
            Quantity::Survival => (1.0, vec![-1.0; num_causes]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArmMode {
    /// Treatment-specific parameter at `A = a*`.
    Single(u8),
    /// Arm 1 minus arm 0.
    Contrast,
}

impl ArmMode {
    /// Arms entering the parameter with their signs.
    pub fn signed_arms(&self) -> Vec<(usize, f64)> {
        match *self {
            ArmMode::Single(a) => vec![(a as usize, 1.0)],
            ArmMode::Contrast => vec![(1, 1.0), (0, -1.0)],
        }
    }

    pub fn sign(&self, arm: usize) -> f64 {
        self.signed_arms().into_iter().find(|&(a, _)| a == arm).map_or(0.0, |(_, s)| s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub quantity: Quantity,
    pub time: f64,
    /// Curve index of `time` on the grid (1-based; 0 is time zero).
    pub point: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetSpec {
    components: Vec<Component>,
    mode: ArmMode,
    curve_mode: bool,
    num_causes: usize,
}

impl TargetSpec {
    pub fn new(grid: &TimeGrid, num_causes: usize, mode: ArmMode, targets: &[(Quantity, f64)]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::InvalidTarget("at least one component is required".into()));
        }
        if let ArmMode::Single(a) = mode {
            if a > 1 {
                return Err(Error::InvalidTarget(format!("arm must be 0 or 1, got {a}")));
            }
        }
        let components = targets
            .iter()
            .map(|&(quantity, time)| {
                if let Quantity::Risk(j) = quantity {
                    if j == 0 || j > num_causes {
                        return Err(Error::InvalidTarget(format!("cause {j} outside 1..={num_causes}")));
                    }
                }
                let point = grid
                    .point_index(time)
                    .ok_or_else(|| Error::InvalidTarget(format!("target time {time} is not a grid point")))?;
                Ok(Component { quantity, time, point })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components, mode, curve_mode: false, num_causes })
    }

    /// Every listed cause at every time, cause-major (`F_1(t_1..t_K), F_2(…)`).
    pub fn absolute_risks(grid: &TimeGrid, num_causes: usize, mode: ArmMode, causes: &[usize], times: &[f64]) -> Result<Self> {
        let targets: Vec<_> =
            causes.iter().flat_map(|&j| times.iter().map(move |&t| (Quantity::Risk(j), t))).collect();
        Self::new(grid, num_causes, mode, &targets)
    }

    /// One quantity along a fine grid of times.
    pub fn curve(grid: &TimeGrid, num_causes: usize, mode: ArmMode, quantity: Quantity, times: &[f64]) -> Result<Self> {
        let targets: Vec<_> = times.iter().map(|&t| (quantity, t)).collect();
        let mut spec = Self::new(grid, num_causes, mode, &targets)?;
        spec.curve_mode = true;
        Ok(spec)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn mode(&self) -> ArmMode {
        self.mode
    }

    pub fn curve_mode(&self) -> bool {
        self.curve_mode
    }

    pub fn num_causes(&self) -> usize {
        self.num_causes
    }

    /// The same mode and causes restricted to the listed components.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            components: indices.iter().map(|&i| self.components[i]).collect(),
            mode: self.mode,
            curve_mode: self.curve_mode,
            num_causes: self.num_causes,
        }
    }

    fn max_point(&self) -> usize {
        self.components.iter().map(|c| c.point).max().unwrap_or(0)
    }

    /// Parameter-space bounds of each component.
    pub fn bounds(&self) -> (f64, f64) {
        match self.mode {
            ArmMode::Single(_) => (0.0, 1.0),
            ArmMode::Contrast => (-1.0, 1.0),
        }
    }
}

/// Per-subject quantities shared by every EIF evaluation along the path.
#[derive(Debug, Clone)]
pub struct TargetingData {
    n: usize,
    m: usize,
    j: usize,
    /// Curve index of each subject's follow-up time.
    positions: Vec<usize>,
    treatment: Vec<u8>,
    cause: Vec<usize>,
    /// `1 / (π(a|L_i) S^c(s_{q+1}−|a,L_i))`, `[arm][subject][interval]`.
    weights: Vec<f64>,
    survival_floor: f64,
}

impl TargetingData {
    pub fn new(dataset: &Dataset, grid: &TimeGrid, nuisance: &NuisanceFit) -> Result<Self> {
        Self::with_floor(dataset, grid, nuisance, DEFAULT_SURVIVAL_FLOOR)
    }

    pub fn with_floor(dataset: &Dataset, grid: &TimeGrid, nuisance: &NuisanceFit, survival_floor: f64) -> Result<Self> {
        let (n, m, j) = (dataset.len(), grid.len(), dataset.num_causes());
        let h = &nuisance.hazards;
        if h.n_subjects() != n || h.n_intervals() != m || h.n_causes() != j {
            return Err(Error::InvalidHazards("hazard tensor does not match data and grid".into()));
        }
        let positions = grid.followup_indices(dataset)?;
        let mut weights = vec![0.0; 2 * n * m];
        for a in 0..2 {
            for i in 0..n {
                let pi = nuisance.propensity_scores[i][a];
                let sc = nuisance.censoring.row(a, i);
                let w = &mut weights[(a * n + i) * m..(a * n + i + 1) * m];
                for q in 0..m {
                    if !(pi > 0.0 && sc[q] > 0.0) {
                        return Err(Error::Positivity(format!(
                            "subject {i}, arm {a}: π = {pi}, S^c = {} at interval {q}",
                            sc[q]
                        )));
                    }
                    w[q] = 1.0 / (pi * sc[q]);
                }
            }
        }
        Ok(Self {
            n,
            m,
            j,
            positions,
            treatment: dataset.subjects().iter().map(|s| s.treatment).collect(),
            cause: dataset.subjects().iter().map(|s| s.event_code).collect(),
            weights,
            survival_floor,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_intervals(&self) -> usize {
        self.m
    }

    pub fn num_causes(&self) -> usize {
        self.j
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn event_cause(&self) -> &[usize] {
        &self.cause
    }

    fn weights(&self, arm: usize, subject: usize) -> &[f64] {
        let k = arm * self.n + subject;
        &self.weights[k * self.m..(k + 1) * self.m]
    }
}

/// `n × d` matrix of EIF values with the plug-in estimates used for centering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EifMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
    pub components: Vec<Component>,
    /// Current plug-in estimates `ψ̂`.
    pub psi: Vec<f64>,
}

impl EifMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, components: Vec<Component>, psi: Vec<f64>) -> Self {
        let n = rows.len();
        let d = components.len();
        let values = rows.into_iter().flatten().collect::<Vec<_>>();
        assert_eq!(values.len(), n * d);
        Self { n, d, values, components, psi }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.d + k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    /// `P_n D*`, the score vector.
    pub fn column_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for row in self.rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.n as f64);
        out
    }

    /// `P_n (D*_k)²` per column.
    pub fn second_moments(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for row in self.rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v * v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.n as f64);
        out
    }

    /// `P_n D* D*ᵀ`, row-major `d × d`.
    pub fn second_moment_matrix(&self) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; d * d];
        for row in self.rows() {
            for a in 0..d {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..d {
                    out[a * d + b] += ra * row[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = out[a * d + b] / self.n as f64;
                out[a * d + b] = v;
                out[b * d + a] = v;
            }
        }
        out
    }

    /// Linear combination of columns, `Σ_k w_k D*_k` per subject.
    pub fn combine(&self, weights: &[f64]) -> Vec<f64> {
        self.rows().map(|r| r.iter().zip(weights).map(|(a, b)| a * b).sum()).collect()
    }
}

struct CurveBuf {
    survival: Vec<f64>,
    risk: Vec<f64>,
}

impl CurveBuf {
    fn new(m: usize, j: usize) -> Self {
        Self { survival: vec![0.0; m + 1], risk: vec![0.0; (m + 1) * j] }
    }
}

/// Plug-in component values `Q_c(t_k | a, L_i)` of one curve set.
fn component_values(spec: &TargetSpec, buf: &CurveBuf, j: usize, out: &mut [f64]) {
    for (o, c) in out.iter_mut().zip(spec.components()) {
        let (c0, coef) = c.quantity.coefficients(j);
        let base = c.point * j;
        *o = c0 + coef.iter().enumerate().map(|(l, w)| w * buf.risk[base + l]).sum::<f64>();
    }
}

/// `ψ̂_c = n⁻¹ Σ_i Q_c(t_k | a, L_i)` (difference of arms in contrast mode).
pub fn plugin_estimates(hazards: &HazardTensor, spec: &TargetSpec) -> Result<Vec<f64>> {
    let (n, m, j) = (hazards.n_subjects(), hazards.n_intervals(), hazards.n_causes());
    let d = spec.dim();
    let mut sum = vec![0.0; d];
    let mut buf = CurveBuf::new(m, j);
    let mut vals = vec![0.0; d];
    for (a, sign) in spec.mode().signed_arms() {
        for i in 0..n {
            hazards.validate_row(a, i)?;
            curves_into(hazards.row(a, i), j, &mut buf.survival, &mut buf.risk);
            component_values(spec, &buf, j, &mut vals);
            for (s, v) in sum.iter_mut().zip(&vals) {
                *s += sign * v;
            }
        }
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// One subject's EIF row before centering: martingale part plus plug-in
/// values, together with the signed plug-in values alone.
fn subject_row(
    data: &TargetingData,
    hazards: &HazardTensor,
    spec: &TargetSpec,
    i: usize,
    buf: &mut CurveBuf,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, j) = (data.m, data.j);
    let d = spec.dim();
    let mut row = vec![0.0; d];
    let mut plug = vec![0.0; d];
    let mut vals = vec![0.0; d];
    let max_point = spec.max_point();
    for (a, sign) in spec.mode().signed_arms() {
        curves_into(hazards.row(a, i), j, &mut buf.survival, &mut buf.risk);
        component_values(spec, buf, j, &mut vals);
        for k in 0..d {
            plug[k] += sign * vals[k];
        }
        if data.treatment[i] as usize != a {
            continue;
        }
        let e = data.positions[i];
        let last = e.min(max_point);
        // prefix sums over points 0..=last: A_l, B, C_l
        let mut pa = vec![0.0; (last + 1) * j];
        let mut pb = vec![0.0; last + 1];
        let mut pc = vec![0.0; (last + 1) * j];
        let w = data.weights(a, i);
        let hrow = hazards.row(a, i);
        for q in 0..last {
            let p = q + 1;
            let sp = buf.survival[p];
            if sp < data.survival_floor {
                return Err(Error::Positivity(format!(
                    "survival {sp} below floor {} for subject {i}, arm {a}, point {p}",
                    data.survival_floor
                )));
            }
            let jump = if q + 1 == e { data.cause[i] } else { 0 };
            let mut resid_total = 0.0;
            for l in 0..j {
                let dn = if jump == l + 1 { 1.0 } else { 0.0 };
                let resid = dn - hrow[q * j + l];
                resid_total += resid;
                pa[p * j + l] = pa[q * j + l] + w[q] * resid;
            }
            let r = w[q] * resid_total / sp;
            pb[p] = pb[q] + r;
            for l in 0..j {
                pc[p * j + l] = pc[q * j + l] + buf.risk[p * j + l] * r;
            }
        }
        for (k, c) in spec.components().iter().enumerate() {
            let kk = e.min(c.point);
            let (_, coef) = c.quantity.coefficients(j);
            let mut mart = 0.0;
            for l in 0..j {
                if coef[l] != 0.0 {
                    mart += coef[l] * (pa[kk * j + l] - buf.risk[c.point * j + l] * pb[kk] + pc[kk * j + l]);
                }
            }
            row[k] += sign * mart;
        }
    }
    let _ = m;
    for k in 0..d {
        row[k] += plug[k];
    }
    Ok((row, plug))
}

/// EIF values of every subject for every component at the given hazards.
pub fn eif_matrix(data: &TargetingData, hazards: &HazardTensor, spec: &TargetSpec) -> Result<EifMatrix> {
    let (n, m, j) = (data.n, data.m, data.j);
    if hazards.n_subjects() != n || hazards.n_intervals() != m || hazards.n_causes() != j {
        return Err(Error::InvalidHazards("hazard tensor does not match targeting data".into()));
    }
    if spec.num_causes() != j {
        return Err(Error::InvalidTarget("target causes do not match the data".into()));
    }
    let results: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map_init(|| CurveBuf::new(m, j), |buf, i| subject_row(data, hazards, spec, i, buf))
        .collect::<Result<_>>()?;
    let d = spec.dim();
    let mut psi = vec![0.0; d];
    for (_, plug) in &results {
        for k in 0..d {
            psi[k] += plug[k];
        }
    }
    psi.iter_mut().for_each(|p| *p /= n as f64);
    let rows: Vec<Vec<f64>> = results
        .into_iter()
        .map(|(mut row, _)| {
            for k in 0..d {
                row[k] -= psi[k];
            }
            row
        })
        .collect();
    Ok(EifMatrix::from_rows(rows, spec.components().to_vec(), psi))
}

/// Log-increment field `g(a, i, q, l) = Σ_c v_c h_c(a, L_i, q, l)` evaluated at
/// the arm argument `a` of the hazard (no observed-treatment indicator), laid
/// out like a [`HazardTensor`]. Arms outside the target get zero.
pub(crate) fn direction_field(
    data: &TargetingData,
    hazards: &HazardTensor,
    spec: &TargetSpec,
    v: &[f64],
) -> Result<Vec<f64>> {
    let (n, m, j) = (data.n, data.m, data.j);
    let max_point = spec.max_point();
    let mut out = vec![0.0; 2 * n * m * j];
    for (a, sign) in spec.mode().signed_arms() {
        // U_l(k) and its suffix sums
        let mut u = vec![0.0; (m + 2) * j];
        for (c, &vc) in spec.components().iter().zip(v) {
            let (_, coef) = c.quantity.coefficients(j);
            for l in 0..j {
                u[c.point * j + l] += sign * vc * coef[l];
            }
        }
        let mut su = vec![0.0; (m + 2) * j];
        for p in (1..=m).rev() {
            for l in 0..j {
                su[p * j + l] = su[(p + 1) * j + l] + u[p * j + l];
            }
        }
        let block = &mut out[a * n * m * j..(a + 1) * n * m * j];
        block.par_chunks_mut(m * j).enumerate().try_for_each_init(
            || CurveBuf::new(m, j),
            |buf, (i, g)| -> Result<()> {
                curves_into(hazards.row(a, i), j, &mut buf.survival, &mut buf.risk);
                let w = data.weights(a, i);
                // SV(p) = Σ_{k ≥ p} Σ_l F_l(k) U_l(k)
                let mut sv = 0.0;
                for p in (1..=max_point).rev() {
                    for l in 0..j {
                        sv += buf.risk[p * j + l] * u[p * j + l];
                    }
                    let q = p - 1;
                    let sp = buf.survival[p];
                    if sp < data.survival_floor {
                        return Err(Error::Positivity(format!(
                            "survival {sp} below floor for subject {i}, arm {a}, point {p}"
                        )));
                    }
                    let mut inner = sv;
                    for l in 0..j {
                        inner -= buf.risk[p * j + l] * su[p * j + l];
                    }
                    let inner = inner / sp;
                    for l in 0..j {
                        g[q * j + l] = w[q] * (su[p * j + l] - inner);
                    }
                }
                Ok(())
            },
        )?;
    }
    Ok(out)
}

/// The literal clever covariate `h_{c,l}` for subject `i` on interval `q`
/// (0-based, `(s_q, s_{q+1}]`), evaluated at the subject's observed arm and
/// including the sign of that arm in contrast mode. `cause` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn clever_covariate(
    curves: &RiskCurves,
    censoring: &CensoringSurvival,
    propensity_scores: &[[f64; 2]],
    dataset: &Dataset,
    spec: &TargetSpec,
    component: usize,
    cause: usize,
    subject: usize,
    interval: usize,
    survival_floor: f64,
) -> Result<f64> {
    let a = dataset.subjects()[subject].treatment as usize;
    let sign = spec.mode().sign(a);
    if sign == 0.0 {
        return Ok(0.0);
    }
    let c = spec.components()[component];
    let p = interval + 1;
    if p > c.point {
        return Ok(0.0);
    }
    let s = curves.survival(a, subject)[p];
    if s < survival_floor {
        return Err(Error::Positivity(format!("survival {s} below floor {survival_floor}")));
    }
    let j = spec.num_causes();
    let (_, coef) = c.quantity.coefficients(j);
    let mut delta = 0.0;
    for jj in 1..=j {
        delta += coef[jj - 1] * (curves.absolute_risk(a, subject, c.point, jj) - curves.absolute_risk(a, subject, p, jj));
    }
    let weight = 1.0 / (propensity_scores[subject][a] * censoring.get(a, subject, interval));
    Ok(sign * weight * (coef[cause - 1] - delta / s))
}

/// Clever covariates `[subject][interval][cause][component]` at the observed arm.
#[derive(Debug, Clone)]
pub struct CleverCovariates {
    n: usize,
    m: usize,
    j: usize,
    d: usize,
    values: Vec<f64>,
}

impl CleverCovariates {
    pub fn compute(dataset: &Dataset, nuisance: &NuisanceFit, hazards: &HazardTensor, spec: &TargetSpec) -> Result<Self> {
        let curves = RiskCurves::compute(hazards)?;
        let (n, m, j, d) = (dataset.len(), hazards.n_intervals(), hazards.n_causes(), spec.dim());
        let mut values = vec![0.0; n * m * j * d];
        for i in 0..n {
            for q in 0..m {
                for l in 1..=j {
                    for k in 0..d {
                        values[((i * m + q) * j + l - 1) * d + k] = clever_covariate(
                            &curves,
                            &nuisance.censoring,
                            &nuisance.propensity_scores,
                            dataset,
                            spec,
                            k,
                            l,
                            i,
                            q,
                            DEFAULT_SURVIVAL_FLOOR,
                        )?;
                    }
                }
            }
        }
        Ok(Self { n, m, j, d, values })
    }

    /// `h` for (subject, interval, cause 1-based), one value per component.
    pub fn get(&self, subject: usize, interval: usize, cause: usize) -> &[f64] {
        let start = ((subject * self.m + interval) * self.j + cause - 1) * self.d;
        &self.values[start..start + self.d]
    }

    pub fn n_subjects(&self) -> usize {
        self.n
    }
}

impl HazardTensor {
    pub(crate) fn validate_row(&self, arm: usize, subject: usize) -> Result<()> {
        for (q, cell) in self.row(arm, subject).chunks(self.n_causes()).enumerate() {
            let total: f64 = cell.iter().sum();
            if cell.iter().any(|&v| !(v >= 0.0)) || total >= 1.0 {
                return Err(Error::InvalidHazards(format!(
                    "arm {arm}, subject {subject}, interval {q}: total hazard {total} not in [0, 1)"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_time_grid, Subject};
    use crate::nuisance::{fit_nuisance, NuisanceOptions, PropensityFit, PropensityModel};
    use approx::assert_abs_diff_eq;

    fn subject(t: f64, event: usize, a: u8) -> Subject {
        Subject { id: format!("{t}"), covariates: vec![0.0], treatment: a, followup_time: t, event_code: event }
    }

    fn setup(subjects: Vec<Subject>, j: usize, hazard: impl FnMut(usize, usize, usize, usize) -> f64) -> (Dataset, TimeGrid, NuisanceFit) {
        let ds = Dataset::new(subjects, j, 10.0).unwrap();
        let grid = build_time_grid(&ds, &[], None).unwrap();
        let h = HazardTensor::from_fn(ds.len(), grid.len(), j, hazard);
        let prop = PropensityFit { model: PropensityModel::EmpiricalProportion { treated: 0.5 }, floor: 0.01, truncated: false };
        let cens = CensoringSurvival::constant(ds.len(), grid.len(), 1.0);
        let fit = NuisanceFit::from_parts(&ds, prop, cens, h).unwrap();
        (ds, grid, fit)
    }

    #[test]
    fn substitution_example() {
        // S(s_1) = 0.8 with F_1(s_1) = 0.1; F_1(s_2) = 0.3
        let subjects = vec![subject(1.0, 1, 1), subject(2.0, 2, 0)];
        let (ds, grid, fit) = setup(subjects, 2, |_, _, q, l| match (q, l) {
            (0, 0) => 0.1,
            (0, 1) => 0.1,
            (1, 0) => 0.25,
            _ => 0.0,
        });
        let curves = RiskCurves::compute(&fit.hazards).unwrap();
        assert_abs_diff_eq!(curves.survival(1, 0)[1], 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(curves.absolute_risk(1, 0, 2, 1), 0.3, epsilon = 1e-15);
        let spec = TargetSpec::new(&grid, 2, ArmMode::Single(1), &[(Quantity::Risk(1), 2.0)]).unwrap();
        let h = clever_covariate(&curves, &fit.censoring, &fit.propensity_scores, &ds, &spec, 0, 1, 0, 0, 1e-8).unwrap();
        assert_abs_diff_eq!(h, 1.5, epsilon = 1e-12);
        // off-arm subject and beyond-target interval vanish
        let spec_t1 = TargetSpec::new(&grid, 2, ArmMode::Single(1), &[(Quantity::Risk(1), 1.0)]).unwrap();
        assert_eq!(clever_covariate(&curves, &fit.censoring, &fit.propensity_scores, &ds, &spec_t1, 0, 1, 0, 1, 1e-8).unwrap(), 0.0);
        assert_eq!(clever_covariate(&curves, &fit.censoring, &fit.propensity_scores, &ds, &spec, 0, 1, 1, 0, 1e-8).unwrap(), 0.0);
    }

    #[test]
    fn single_cause_clever_covariate_is_survival_ratio() {
        let subjects = vec![subject(1.0, 1, 1), subject(2.0, 0, 1), subject(3.0, 1, 0)];
        let (ds, grid, fit) = setup(subjects, 1, |_, _, q, _| 0.1 + 0.05 * q as f64);
        let curves = RiskCurves::compute(&fit.hazards).unwrap();
        let spec = TargetSpec::new(&grid, 1, ArmMode::Single(1), &[(Quantity::Risk(1), 3.0)]).unwrap();
        for q in 0..3 {
            let h = clever_covariate(&curves, &fit.censoring, &fit.propensity_scores, &ds, &spec, 0, 1, 1, q, 1e-8).unwrap();
            let s = curves.survival(1, 1);
            assert_abs_diff_eq!(h, 2.0 * s[3] / s[q + 1], epsilon = 1e-12);
        }
    }

    #[test]
    fn plugin_of_zero_hazards_is_zero() {
        let subjects = vec![subject(1.0, 1, 1), subject(2.0, 0, 0)];
        let (_, grid, fit) = setup(subjects, 1, |_, _, _, _| 0.0);
        let spec = TargetSpec::new(&grid, 1, ArmMode::Single(1), &[(Quantity::Risk(1), 2.0)]).unwrap();
        assert_eq!(plugin_estimates(&fit.hazards, &spec).unwrap(), vec![0.0]);
    }

    #[test]
    fn plugin_of_identical_subjects_is_their_value() {
        let subjects = vec![subject(1.0, 1, 1), subject(2.0, 0, 0), subject(3.0, 1, 1)];
        let (_, grid, fit) = setup(subjects, 1, |_, _, q, _| 0.2 * (q + 1) as f64 / 3.0);
        let spec = TargetSpec::new(&grid, 1, ArmMode::Single(0), &[(Quantity::Risk(1), 3.0), (Quantity::Survival, 3.0)]).unwrap();
        let psi = plugin_estimates(&fit.hazards, &spec).unwrap();
        let f = crate::hazard::absolute_risk_curve(&fit.hazards, 0, 0, 1).unwrap();
        assert_abs_diff_eq!(psi[0], f[3], epsilon = 1e-15);
        assert_abs_diff_eq!(psi[1], 1.0 - f[3], epsilon = 1e-15);
    }

    #[test]
    fn censored_subject_has_no_jump_term() {
        let subjects = vec![subject(1.0, 1, 1), subject(2.0, 0, 1), subject(3.0, 1, 0)];
        let (ds, grid, fit) = setup(subjects, 1, |_, _, _, _| 0.2);
        let data = TargetingData::new(&ds, &grid, &fit).unwrap();
        let spec = TargetSpec::new(&grid, 1, ArmMode::Single(1), &[(Quantity::Risk(1), 3.0)]).unwrap();
        let eif = eif_matrix(&data, &fit.hazards, &spec).unwrap();
        let curves = RiskCurves::compute(&fit.hazards).unwrap();
        let s = curves.survival(1, 1);
        // D = −Σ_{q<2} h_q λ + F(t) − ψ̂ with h_q = 2 S(3)/S(q+1)
        let compensator: f64 = (0..2).map(|q| 2.0 * s[3] / s[q + 1] * 0.2).sum();
        let expected = -compensator + (1.0 - s[3]) - eif.psi[0];
        assert_abs_diff_eq!(eif.get(1, 0), expected, epsilon = 1e-12);
    }

    #[test]
    fn survival_column_is_minus_sum_of_risks() {
        let subjects: Vec<_> = (0..12).map(|i| subject(1.0 + (i % 5) as f64, i % 3, (i % 2) as u8)).collect();
        let (ds, grid, fit) = setup(subjects, 2, |a, i, q, l| 0.02 + 0.01 * ((a + i + q + l) % 4) as f64);
        let data = TargetingData::new(&ds, &grid, &fit).unwrap();
        for mode in [ArmMode::Single(1), ArmMode::Contrast] {
            let spec = TargetSpec::new(&grid, 2, mode, &[(Quantity::Risk(1), 3.0), (Quantity::Risk(2), 3.0), (Quantity::Survival, 3.0)]).unwrap();
            let eif = eif_matrix(&data, &fit.hazards, &spec).unwrap();
            for i in 0..ds.len() {
                assert_abs_diff_eq!(eif.get(i, 2), -(eif.get(i, 0) + eif.get(i, 1)), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn saturated_fit_solves_every_score() {
        // uncensored, one arm targeted, empirical hazards with no pseudo-count
        let subjects: Vec<_> = (0..20).map(|i| subject(1.0 + (i % 7) as f64, 1 + i % 2, (i % 2) as u8)).collect();
        let ds = Dataset::new(subjects, 2, 10.0).unwrap();
        let grid = build_time_grid(&ds, &[], None).unwrap();
        let mut opts = NuisanceOptions::default();
        opts.hazard.pseudocount = 0.0;
        let fit = fit_nuisance(&ds, &grid, &opts).unwrap();
        let data = TargetingData::new(&ds, &grid, &fit).unwrap();
        let times: Vec<f64> = grid.times().to_vec();
        let spec = TargetSpec::absolute_risks(&grid, 2, ArmMode::Single(1), &[1, 2], &times[..times.len() - 1]).unwrap();
        let eif = eif_matrix(&data, &fit.hazards, &spec).unwrap();
        for mean in eif.column_means() {
            assert!(mean.abs() <= 1e-10, "{mean}");
        }
    }

    #[test]
    fn direction_field_matches_elementwise_sum() {
        let subjects: Vec<_> = (0..8).map(|i| subject(1.0 + (i % 4) as f64, i % 3, (i % 2) as u8)).collect();
        let (ds, grid, fit) = setup(subjects, 2, |a, i, q, l| 0.03 + 0.02 * ((a + 2 * i + q + l) % 3) as f64);
        let data = TargetingData::new(&ds, &grid, &fit).unwrap();
        let spec = TargetSpec::new(&grid, 2, ArmMode::Contrast, &[(Quantity::Risk(1), 2.0), (Quantity::Risk(2), 4.0), (Quantity::Survival, 3.0)]).unwrap();
        let v = [0.3, -0.7, 0.2];
        let g = direction_field(&data, &fit.hazards, &spec, &v).unwrap();
        let clever = CleverCovariates::compute(&ds, &fit, &fit.hazards, &spec).unwrap();
        let (m, j) = (grid.len(), 2);
        // at the observed arm the field equals vᵀh (h already signed)
        for i in 0..ds.len() {
            let a = ds.subjects()[i].treatment as usize;
            for q in 0..m {
                for l in 1..=j {
                    let expected: f64 = clever.get(i, q, l).iter().zip(&v).map(|(h, w)| h * w).sum();
                    let got = g[((a * ds.len() + i) * m + q) * j + l - 1];
                    assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
                }
            }
        }
    }
}
