//! One-step targeting along the universal least favorable submodel.
//!
//! Each step moves every targeted hazard multiplicatively,
//! `λ_l ← λ_l exp(dx · vᵀ h_l)` with `v = Σ⁻¹x / ‖x‖_Σ` and `x = P_n D*`
//! (components already solved are zeroed in `x`). A step is kept when the
//! score norm does not grow; otherwise the step size is halved. The loop stops
//! once `max_k |P_n D*_k| / σ̂_k` falls to the criterion, `1/(√n log n)` unless
//! configured otherwise.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TimeGrid;
use crate::eif::{direction_field, eif_matrix, EifMatrix, Quantity, TargetSpec, TargetingData};
use crate::error::{Error, Result};
use crate::hazard::{clamp_cell, curves_into, HazardTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Identity,
    #[serde(alias = "variance")]
    VarianceDiagonal,
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    /// Added to the covariance diagonal; `None` means `10⁻⁸ · trace/d`.
    pub ridge: Option<f64>,
    /// Build the metric once from the initial EIF instead of every step.
    pub freeze_at_initial: bool,
}

impl NormSpec {
    pub fn new(kind: NormKind) -> Self {
        Self { kind, ridge: None, freeze_at_initial: false }
    }
}

impl Default for NormSpec {
    fn default() -> Self {
        Self::new(NormKind::VarianceDiagonal)
    }
}

/// A positive definite metric `Σ_d` in factored form.
#[derive(Debug, Clone)]
pub enum Metric {
    Diagonal(Vec<f64>),
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
}

impl Metric {
    pub fn identity(d: usize) -> Self {
        Metric::Diagonal(vec![1.0; d])
    }

    /// Variances `P_n D_k²`; degenerate columns (identically zero) get weight one.
    pub fn variance_diagonal(eif: &EifMatrix) -> Self {
        Metric::Diagonal(eif.second_moments().into_iter().map(|v| if v > 0.0 { v } else { 1.0 }).collect())
    }

    pub fn covariance(eif: &EifMatrix, ridge: Option<f64>) -> Result<Self> {
        let d = eif.dim();
        let mut m = eif.second_moment_matrix();
        let trace: f64 = (0..d).map(|k| m[k * d + k]).sum();
        let ridge = ridge.unwrap_or(1e-8 * trace / d as f64);
        for k in 0..d {
            m[k * d + k] += ridge;
        }
        DMatrix::from_row_slice(d, d, &m)
            .cholesky()
            .map(Metric::Dense)
            .ok_or_else(|| Error::NotPositiveDefinite(format!("covariance of dimension {d} with ridge {ridge}")))
    }

    /// Builds the metric named by `spec`, falling back from a singular
    /// covariance to the variance diagonal.
    pub fn build(spec: &NormSpec, eif: &EifMatrix) -> Self {
        match spec.kind {
            NormKind::Identity => Self::identity(eif.dim()),
            NormKind::VarianceDiagonal => Self::variance_diagonal(eif),
            NormKind::Covariance => Self::covariance(eif, spec.ridge).unwrap_or_else(|_| Self::variance_diagonal(eif)),
        }
    }

    pub fn solve(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Metric::Diagonal(diag) => x.iter().zip(diag).map(|(a, s)| a / s).collect(),
            Metric::Dense(chol) => chol.solve(&DVector::from_column_slice(x)).iter().copied().collect(),
        }
    }

    /// `√(xᵀ Σ⁻¹ x)`.
    pub fn norm(&self, x: &[f64]) -> f64 {
        let y = self.solve(x);
        x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    }
}

/// `‖x‖_Σ` with `Σ` built from `norm` and `eif`.
pub fn norm_value(score: &[f64], norm: &NormSpec, eif: &EifMatrix) -> Result<f64> {
    let metric = match norm.kind {
        NormKind::Covariance => Metric::covariance(eif, norm.ridge)?,
        _ => Metric::build(norm, eif),
    };
    Ok(metric.norm(score))
}

/// `1/(√n log n)`.
pub fn default_criterion(n: usize) -> f64 {
    let n = n as f64;
    1.0 / (n.sqrt() * n.ln())
}

/// `|P_n D*_k| / σ̂_k` per component, zero for degenerate columns.
pub fn standardized_scores(eif: &EifMatrix) -> Vec<f64> {
    eif.column_means()
        .into_iter()
        .zip(eif.second_moments())
        .map(|(x, s2)| if s2 > 0.0 { x.abs() / s2.sqrt() } else { 0.0 })
        .collect()
}

/// Components whose standardized score already meets the criterion.
pub fn mask_solved(eif: &EifMatrix, criterion: f64) -> Vec<bool> {
    standardized_scores(eif).into_iter().map(|r| r <= criterion).collect()
}

/// Log-increment field for one step and the coefficient vector `v` behind it.
#[derive(Debug, Clone)]
pub struct Direction {
    pub field: Vec<f64>,
    pub coefficients: Vec<f64>,
}

pub fn update_direction(
    data: &TargetingData,
    hazards: &HazardTensor,
    spec: &TargetSpec,
    score: &[f64],
    metric: &Metric,
    mask: &[bool],
) -> Result<Direction> {
    let masked: Vec<f64> = score.iter().zip(mask).map(|(&x, &m)| if m { 0.0 } else { x }).collect();
    let len = metric.norm(&masked);
    if !(len > 0.0) {
        return Err(Error::ZeroScore);
    }
    let coefficients: Vec<f64> = metric.solve(&masked).into_iter().map(|v| v / len).collect();
    let field = direction_field(data, hazards, spec, &coefficients)?;
    Ok(Direction { field, coefficients })
}

/// `λ ← λ exp(dx · g)` followed by clamping; returns the candidate and the
/// number of cells where a bound was active.
pub fn apply_one_step(hazards: &HazardTensor, field: &[f64], dx: f64) -> (HazardTensor, usize) {
    let mut out = hazards.clone();
    let j = out.n_causes();
    let upper = 1.0 - out.clamp_margin();
    let mut hits = 0;
    for (cell, g) in out.values_mut().chunks_mut(j).zip(field.chunks(j)) {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (v, gv) in cell.iter_mut().zip(g) {
            *v *= (dx * gv).exp();
        }
        hits += clamp_cell(cell, upper) as usize;
    }
    (out, hits)
}

/// Empirical log-likelihood of the event process under the observed arm,
/// `n⁻¹ Σ_i Σ_l [Σ_{q at risk} −λ_l + 1{event l} log λ_l]`.
pub fn log_likelihood(data: &TargetingData, hazards: &HazardTensor) -> f64 {
    let j = data.num_causes();
    let per_subject: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let row = hazards.row(data.treatment()[i] as usize, i);
            let e = data.positions()[i];
            let mut ll = -row[..e * j].iter().sum::<f64>();
            let cause = data.event_cause()[i];
            if cause > 0 {
                ll += row[(e - 1) * j + cause - 1].ln();
            }
            ll
        })
        .collect();
    per_subject.iter().sum::<f64>() / data.n() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetingConfig {
    pub norm: NormSpec,
    pub dx0: f64,
    pub dx_min: f64,
    pub max_steps: usize,
    /// Stopping threshold; `None` uses `1/(√n log n)`.
    pub criterion: Option<f64>,
}

impl Default for TargetingConfig {
    fn default() -> Self {
        Self { norm: NormSpec::default(), dx0: 0.05, dx_min: 1e-6, max_steps: 2000, criterion: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub norm_before: f64,
    pub norm_after: f64,
    pub dx: f64,
    pub masked: usize,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct FluctuationState {
    pub hazards: HazardTensor,
    pub epsilon_total: f64,
    pub dx: f64,
    pub mask: Vec<bool>,
    /// Score norms of accepted steps, before and after, under that step's metric.
    pub history: Vec<StepRecord>,
    pub clamp_hits: usize,
}

impl FluctuationState {
    /// `‖P_n D*‖` after each accepted step.
    pub fn norm_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.norm_after).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxSteps,
    StepTooSmall,
}

#[derive(Debug, Clone)]
pub struct TmleResult {
    pub state: FluctuationState,
    /// EIF at the final hazards.
    pub eif: EifMatrix,
    pub psi: Vec<f64>,
    pub initial_psi: Vec<f64>,
    pub criterion: f64,
    /// `|P_n D*_k| / σ̂_k` at the final hazards.
    pub final_ratios: Vec<f64>,
    /// Loop iterations, counting rejected attempts.
    pub steps: usize,
    pub termination: Termination,
}

impl TmleResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    pub fn final_scores(&self) -> Vec<f64> {
        self.eif.column_means()
    }
}

pub fn run_one_step_tmle(
    data: &TargetingData,
    initial: &HazardTensor,
    spec: &TargetSpec,
    config: &TargetingConfig,
) -> Result<TmleResult> {
    if !(config.dx0 > 0.0 && config.dx_min > 0.0) {
        return Err(Error::InvalidConfig("step sizes must be positive".into()));
    }
    let criterion = config.criterion.unwrap_or_else(|| default_criterion(data.n()));
    let mut state = FluctuationState {
        hazards: initial.clone(),
        epsilon_total: 0.0,
        dx: config.dx0,
        mask: vec![false; spec.dim()],
        history: Vec::new(),
        clamp_hits: 0,
    };
    let mut eif = eif_matrix(data, &state.hazards, spec)?;
    let initial_psi = eif.psi.clone();
    let frozen = config.norm.freeze_at_initial.then(|| Metric::build(&config.norm, &eif));
    let mut steps = 0;
    let termination = loop {
        let ratios = standardized_scores(&eif);
        state.mask = ratios.iter().map(|&r| r <= criterion).collect();
        if state.mask.iter().all(|&m| m) {
            break Termination::Converged;
        }
        if steps >= config.max_steps {
            break Termination::MaxSteps;
        }
        steps += 1;
        let metric = frozen.clone().unwrap_or_else(|| Metric::build(&config.norm, &eif));
        let score = eif.column_means();
        let norm_before = metric.norm(&score);
        let masked = state.mask.iter().filter(|&&m| m).count();
        let mut accepted = None;
        // masked direction first, then the full direction at the same step size
        let attempts: &[bool] = if masked > 0 { &[true, false] } else { &[false] };
        for &use_mask in attempts {
            let mask: Vec<bool> = if use_mask { state.mask.clone() } else { vec![false; spec.dim()] };
            let direction = update_direction(data, &state.hazards, spec, &score, &metric, &mask)?;
            let (candidate, hits) = apply_one_step(&state.hazards, &direction.field, state.dx);
            // a candidate that drives survival below the floor is rejected like any overshoot
            let cand_eif = match eif_matrix(data, &candidate, spec) {
                Ok(e) => e,
                Err(Error::Positivity(_)) => continue,
                Err(e) => return Err(e),
            };
            let norm_after = metric.norm(&cand_eif.column_means());
            if norm_after <= norm_before {
                accepted = Some((candidate, cand_eif, hits, norm_after, if use_mask { masked } else { 0 }));
                break;
            }
        }
        match accepted {
            Some((candidate, cand_eif, hits, norm_after, masked)) => {
                state.hazards = candidate;
                state.clamp_hits += hits;
                state.epsilon_total += state.dx;
                state.history.push(StepRecord {
                    norm_before,
                    norm_after,
                    dx: state.dx,
                    masked,
                    log_likelihood: log_likelihood(data, &state.hazards),
                });
                eif = cand_eif;
            }
            None => {
                state.dx /= 2.0;
                if state.dx < config.dx_min {
                    break Termination::StepTooSmall;
                }
            }
        }
    };
    let final_ratios = standardized_scores(&eif);
    let psi = eif.psi.clone();
    Ok(TmleResult { state, eif, psi, initial_psi, criterion, final_ratios, steps, termination })
}

/// Per-component targeting baseline: each component gets its own `d = 1`
/// loop started from the same initial hazards.
#[derive(Debug, Clone)]
pub struct IterativeResult {
    pub psi: Vec<f64>,
    pub runs: Vec<TmleResult>,
}

impl IterativeResult {
    pub fn converged(&self) -> bool {
        self.runs.iter().all(TmleResult::converged)
    }
}

pub fn iterative_tmle(
    data: &TargetingData,
    initial: &HazardTensor,
    spec: &TargetSpec,
    config: &TargetingConfig,
) -> Result<IterativeResult> {
    let runs = (0..spec.dim())
        .into_par_iter()
        .map(|k| run_one_step_tmle(data, initial, &spec.subset(&[k]), config))
        .collect::<Result<Vec<_>>>()?;
    let psi = runs.iter().map(|r| r.psi[0]).collect();
    Ok(IterativeResult { psi, runs })
}

/// `Σ_j F̂_j(t) + Ŝ(t)` at each time where the spec holds every cause's risk
/// and the survival; one for single-arm fits, zero for contrasts when compatible.
pub fn compatibility_sums(spec: &TargetSpec, estimates: &[f64]) -> Vec<(f64, f64)> {
    let mut times: Vec<f64> = spec.components().iter().map(|c| c.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let j = spec.num_causes();
    times
        .into_iter()
        .filter_map(|t| {
            let find = |q: Quantity| spec.components().iter().position(|c| c.time == t && c.quantity == q);
            let s = find(Quantity::Survival)?;
            let mut sum = estimates[s];
            for cause in 1..=j {
                sum += estimates[find(Quantity::Risk(cause))?];
            }
            Some((t, sum))
        })
        .collect()
}

/// Averaged state occupation probabilities of one arm at every grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateTable {
    pub times: Vec<f64>,
    /// `risk[j][m]` is `F̂_{j+1}` at curve index `m` (index 0 is time zero).
    pub risk: Vec<Vec<f64>>,
    pub survival: Vec<f64>,
}

impl StateTable {
    pub fn compute(hazards: &HazardTensor, grid: &TimeGrid, arm: usize) -> Self {
        const CHUNK: usize = 64;
        let (n, m, j) = (hazards.n_subjects(), hazards.n_intervals(), hazards.n_causes());
        // fixed chunks summed in order keep the result independent of scheduling
        let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let (mut s_acc, mut r_acc) = (vec![0.0; m + 1], vec![0.0; (m + 1) * j]);
                let (mut s, mut r) = (vec![0.0; m + 1], vec![0.0; (m + 1) * j]);
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    curves_into(hazards.row(arm, i), j, &mut s, &mut r);
                    s_acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
                    r_acc.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
                }
                (s_acc, r_acc)
            })
            .collect();
        let (mut surv, mut risk) = (vec![0.0; m + 1], vec![0.0; (m + 1) * j]);
        for (s, r) in partial {
            surv.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            risk.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        }
        let scale = 1.0 / n as f64;
        let mut times = vec![0.0];
        times.extend_from_slice(grid.times());
        Self {
            times,
            risk: (0..j).map(|l| (0..=m).map(|p| risk[p * j + l] * scale).collect()).collect(),
            survival: surv.into_iter().map(|s| s * scale).collect(),
        }
    }

    /// `Σ_j F̂_j + Ŝ` at each grid point.
    pub fn sums(&self) -> Vec<f64> {
        (0..self.survival.len()).map(|p| self.survival[p] + self.risk.iter().map(|r| r[p]).sum::<f64>()).collect()
    }

    pub fn max_sum_deviation(&self) -> f64 {
        self.sums().into_iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn is_monotone(&self) -> bool {
        self.survival.windows(2).all(|w| w[1] <= w[0]) && self.risk.iter().all(|r| r.windows(2).all(|w| w[1] >= w[0]))
    }
}
