//! Initial estimators of the treatment mechanism, the censoring survival and
//! the cause-specific hazards.
//!
//! Two deterministic hazard fits are offered: a covariate-free occurrence /
//! exposure estimate per arm (smoothed with a pseudo-count), and a pooled
//! logistic regression per cause on a person-interval data set.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TimeGrid};
use crate::error::{Error, Result};
use crate::hazard::{clamp_cell, HazardTensor, DEFAULT_CLAMP_MARGIN};
use crate::cox::fit_cox;
use crate::logistic::{expit, fit_logistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityKind {
    EmpiricalProportion,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HazardMode {
    StratifiedNonparametric,
    PooledLogistic,
    /// Proportional hazards in `(L, L²)` with a Breslow baseline per arm and cause.
    Cox,
}

#[derive(Debug, Clone, Serialize)]
pub enum PropensityModel {
    EmpiricalProportion { treated: f64 },
    /// Coefficients on `(1, L_1, …, L_p)`.
    Logistic { coefficients: Vec<f64> },
}

#[derive(Debug, Clone, Serialize)]
pub struct PropensityFit {
    pub model: PropensityModel,
    pub floor: f64,
    /// Whether any in-sample prediction hit the floor.
    pub truncated: bool,
}

impl PropensityFit {
    /// `π(a | ℓ)`, truncated to `[floor, 1 − floor]`.
    pub fn predict(&self, arm: u8, covariates: &[f64]) -> f64 {
        let p1 = match &self.model {
            PropensityModel::EmpiricalProportion { treated } => *treated,
            PropensityModel::Logistic { coefficients } => {
                let eta = coefficients[0] + coefficients[1..].iter().zip(covariates).map(|(b, x)| b * x).sum::<f64>();
                expit(eta)
            }
        };
        let p1 = p1.clamp(self.floor, 1.0 - self.floor);
        if arm == 1 {
            p1
        } else {
            1.0 - p1
        }
    }
}

pub fn fit_propensity(dataset: &Dataset, kind: PropensityKind, floor: f64) -> Result<PropensityFit> {
    let n = dataset.len();
    let treated = dataset.subjects().iter().filter(|s| s.treatment == 1).count();
    if treated == 0 || treated == n {
        let empty = if treated == 0 { 1 } else { 0 };
        return Err(Error::Positivity(format!("no subjects in arm {empty}, so π({empty} | L) = 0 for every L")));
    }
    let model = match kind {
        PropensityKind::EmpiricalProportion => PropensityModel::EmpiricalProportion { treated: treated as f64 / n as f64 },
        PropensityKind::Logistic => {
            let p = dataset.num_covariates() + 1;
            let mut design = Vec::with_capacity(n * p);
            let mut y = Vec::with_capacity(n);
            for s in dataset.subjects() {
                design.push(1.0);
                design.extend_from_slice(&s.covariates);
                y.push(s.treatment as f64);
            }
            let fit = fit_logistic(&design, p, &y, 1e-4, 100);
            PropensityModel::Logistic { coefficients: fit.coefficients }
        }
    };
    let mut out = PropensityFit { model, floor, truncated: false };
    out.truncated = dataset.subjects().iter().any(|s| {
        let raw = match &out.model {
            PropensityModel::EmpiricalProportion { treated } => *treated,
            PropensityModel::Logistic { coefficients } => expit(
                coefficients[0] + coefficients[1..].iter().zip(&s.covariates).map(|(b, x)| b * x).sum::<f64>(),
            ),
        };
        raw < floor || raw > 1.0 - floor
    });
    Ok(out)
}

/// `S^c(s_{q+1}− | a, L_i)` indexed `[arm][subject][interval]`.
#[derive(Debug, Clone, Serialize)]
pub struct CensoringSurvival {
    n_subjects: usize,
    n_intervals: usize,
    values: Vec<f64>,
    /// Whether the positivity floor was applied anywhere.
    pub floored: bool,
    pub floor: f64,
}

impl CensoringSurvival {
    pub fn constant(n_subjects: usize, n_intervals: usize, value: f64) -> Self {
        Self { n_subjects, n_intervals, values: vec![value; 2 * n_subjects * n_intervals], floored: false, floor: 0.0 }
    }

    /// Builds from per-arm profiles shared by all subjects of the arm.
    pub fn from_profiles(n_subjects: usize, profiles: [Vec<f64>; 2], floor: f64) -> Self {
        let m = profiles[0].len();
        let mut values = Vec::with_capacity(2 * n_subjects * m);
        let mut floored = false;
        for profile in &profiles {
            let clipped: Vec<f64> = profile
                .iter()
                .map(|&v| {
                    if v < floor {
                        floored = true;
                        floor
                    } else {
                        v
                    }
                })
                .collect();
            for _ in 0..n_subjects {
                values.extend_from_slice(&clipped);
            }
        }
        Self { n_subjects, n_intervals: m, values, floored, floor }
    }

    #[inline]
    pub fn get(&self, arm: usize, subject: usize, interval: usize) -> f64 {
        self.values[(arm * self.n_subjects + subject) * self.n_intervals + interval]
    }

    pub fn row(&self, arm: usize, subject: usize) -> &[f64] {
        let start = (arm * self.n_subjects + subject) * self.n_intervals;
        &self.values[start..start + self.n_intervals]
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }
}

/// Reverse product-limit estimate of the censoring survival just before each
/// grid point. Censorings tied with events are placed after the events.
pub fn fit_censoring_survival(
    dataset: &Dataset,
    grid: &TimeGrid,
    stratify_by_arm: bool,
    floor: f64,
) -> Result<CensoringSurvival> {
    let m = grid.len();
    let positions = grid.followup_indices(dataset)?;
    let mut profiles: [Vec<f64>; 2] = [vec![1.0; m], vec![1.0; m]];
    let strata: Vec<Vec<u8>> = if stratify_by_arm { vec![vec![0], vec![1]] } else { vec![vec![0, 1]] };
    for arms in strata {
        let members: Vec<usize> =
            (0..dataset.len()).filter(|&i| arms.contains(&dataset.subjects()[i].treatment)).collect();
        if members.is_empty() {
            return Err(Error::Degenerate(format!("censoring stratum {arms:?} has no subjects")));
        }
        // at_risk[q]: subjects with follow-up ≥ s_{q+1}
        let mut ends = vec![0usize; m + 1];
        let mut censored = vec![0usize; m];
        for &i in &members {
            let e = positions[i];
            ends[e] += 1;
            if dataset.subjects()[i].event_code == 0 {
                censored[e - 1] += 1;
            }
        }
        let mut at_risk = members.len();
        let mut surv_minus = vec![1.0; m];
        let mut running = 1.0;
        for q in 0..m {
            surv_minus[q] = running;
            if at_risk > 0 {
                running *= 1.0 - censored[q] as f64 / at_risk as f64;
            }
            at_risk -= ends[q + 1];
        }
        for &a in &arms {
            profiles[a as usize] = surv_minus.clone();
        }
    }
    Ok(CensoringSurvival::from_profiles(dataset.len(), profiles, floor))
}

#[derive(Debug, Clone)]
pub struct HazardFit {
    pub hazards: HazardTensor,
    pub mode_used: HazardMode,
    /// Per cause, whether the pooled logistic fit converged.
    pub converged: Vec<bool>,
    pub fell_back: bool,
    pub clamp_hits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardOptions {
    pub mode: HazardMode,
    /// Total pseudo-events per (arm, cause), spread in proportion to the risk set.
    pub pseudocount: f64,
    pub ridge: f64,
    /// Maximum number of piecewise-constant time bins in the pooled logistic model.
    pub time_bins: usize,
    pub clamp_margin: f64,
}

impl Default for HazardOptions {
    fn default() -> Self {
        Self {
            mode: HazardMode::StratifiedNonparametric,
            pseudocount: 0.5,
            ridge: 1e-3,
            time_bins: 8,
            clamp_margin: DEFAULT_CLAMP_MARGIN,
        }
    }
}

pub fn fit_cause_hazards(dataset: &Dataset, grid: &TimeGrid, options: &HazardOptions) -> Result<HazardFit> {
    let positions = grid.followup_indices(dataset)?;
    match options.mode {
        HazardMode::StratifiedNonparametric => Ok(stratified_hazards(dataset, grid, &positions, options)),
        HazardMode::PooledLogistic | HazardMode::Cox => {
            let fit = if options.mode == HazardMode::Cox {
                cox_hazards(dataset, grid, &positions, options)
            } else {
                pooled_logistic_hazards(dataset, grid, &positions, options)?
            };
            if fit.converged.iter().all(|&c| c) {
                Ok(fit)
            } else {
                let mut fallback = stratified_hazards(dataset, grid, &positions, options);
                fallback.converged = fit.converged;
                fallback.fell_back = true;
                Ok(fallback)
            }
        }
    }
}

fn stratified_hazards(dataset: &Dataset, grid: &TimeGrid, positions: &[usize], options: &HazardOptions) -> HazardFit {
    let (n, m, j) = (dataset.len(), grid.len(), dataset.num_causes());
    let mut per_arm = [vec![0.0; m * j], vec![0.0; m * j]];
    for a in 0..2u8 {
        let mut ends = vec![0usize; m + 1];
        let mut events = vec![0usize; m * j];
        let mut count = 0usize;
        for (s, &e) in dataset.subjects().iter().zip(positions) {
            if s.treatment != a {
                continue;
            }
            count += 1;
            ends[e] += 1;
            if s.event_code > 0 {
                events[(e - 1) * j + s.event_code - 1] += 1;
            }
        }
        let mut at_risk = vec![0usize; m];
        let mut remaining = count;
        let mut exposure = 0usize;
        for q in 0..m {
            at_risk[q] = remaining;
            exposure += remaining;
            remaining -= ends[q + 1];
        }
        let spread = if exposure > 0 { options.pseudocount / exposure as f64 } else { 0.0 };
        let table = &mut per_arm[a as usize];
        for q in 0..m {
            for l in 0..j {
                let raw = if at_risk[q] > 0 { events[q * j + l] as f64 / at_risk[q] as f64 } else { 0.0 };
                table[q * j + l] = raw + spread;
            }
        }
    }
    let mut hazards = HazardTensor::zeros(n, m, j).with_clamp_margin(options.clamp_margin);
    for a in 0..2 {
        for i in 0..n {
            hazards.row_mut(a, i).copy_from_slice(&per_arm[a]);
        }
    }
    let clamp_hits = hazards.clamp_in_place();
    HazardFit {
        hazards,
        mode_used: HazardMode::StratifiedNonparametric,
        converged: vec![true; j],
        fell_back: false,
        clamp_hits,
    }
}

/// Bin edges (upper bounds, as curve indices) at quantiles of the cause's event times.
fn time_bins(dataset: &Dataset, grid: &TimeGrid, cause: usize, max_bins: usize) -> Vec<usize> {
    let mut times: Vec<f64> = dataset
        .subjects()
        .iter()
        .filter(|s| s.event_code == cause)
        .map(|s| s.followup_time)
        .collect();
    times.sort_by(f64::total_cmp);
    let bins = (times.len() / 20).clamp(1, max_bins.max(1));
    let mut edges: Vec<usize> = (1..bins)
        .map(|b| {
            let t = times[b * times.len() / bins];
            grid.floor_index(t)
        })
        .collect();
    edges.push(grid.len());
    edges.dedup();
    edges
}

struct PooledDesign {
    edges: Vec<usize>,
    log_width: Vec<f64>,
    p_cov: usize,
}

impl PooledDesign {
    fn width(&self) -> usize {
        self.edges.len() + 2 + 2 * self.p_cov
    }

    fn fill(&self, row: &mut [f64], q: usize, arm: u8, covariates: &[f64]) {
        row.fill(0.0);
        let bin = self.edges.partition_point(|&e| e < q + 1);
        row[bin] = 1.0;
        let mut k = self.edges.len();
        row[k] = self.log_width[q];
        k += 1;
        row[k] = arm as f64;
        k += 1;
        for (c, &x) in covariates.iter().enumerate() {
            row[k + c] = x;
            row[k + self.p_cov + c] = x * x;
        }
    }
}

fn pooled_logistic_hazards(
    dataset: &Dataset,
    grid: &TimeGrid,
    positions: &[usize],
    options: &HazardOptions,
) -> Result<HazardFit> {
    let (n, m, j) = (dataset.len(), grid.len(), dataset.num_causes());
    let mut prev = 0.0;
    let log_width: Vec<f64> = grid
        .times()
        .iter()
        .map(|&t| {
            let w = (t - prev).max(1e-12);
            prev = t;
            w.ln()
        })
        .collect();
    let mut hazards = HazardTensor::zeros(n, m, j).with_clamp_margin(options.clamp_margin);
    let mut converged = Vec::with_capacity(j);
    let rows: usize = positions.iter().sum();
    for cause in 1..=j {
        let design = PooledDesign { edges: time_bins(dataset, grid, cause, options.time_bins), log_width: log_width.clone(), p_cov: dataset.num_covariates() };
        let p = design.width();
        let mut x = vec![0.0; rows * p];
        let mut y = Vec::with_capacity(rows);
        let mut r = 0;
        for (s, &e) in dataset.subjects().iter().zip(positions) {
            for q in 0..e {
                design.fill(&mut x[r * p..(r + 1) * p], q, s.treatment, &s.covariates);
                y.push(if q + 1 == e && s.event_code == cause { 1.0 } else { 0.0 });
                r += 1;
            }
        }
        let fit = fit_logistic(&x, p, &y, options.ridge, 100);
        converged.push(fit.converged);
        let mut row = vec![0.0; p];
        for a in 0..2u8 {
            for (i, s) in dataset.subjects().iter().enumerate() {
                for q in 0..m {
                    design.fill(&mut row, q, a, &s.covariates);
                    let eta: f64 = row.iter().zip(&fit.coefficients).map(|(x, b)| x * b).sum();
                    hazards.set(a as usize, i, q, cause - 1, expit(eta));
                }
            }
        }
    }
    let upper = 1.0 - options.clamp_margin;
    let mut clamp_hits = 0;
    for cell in hazards.values_mut().chunks_mut(j) {
        clamp_hits += clamp_cell(cell, upper) as usize;
    }
    Ok(HazardFit { hazards, mode_used: HazardMode::PooledLogistic, converged, fell_back: false, clamp_hits })
}

/// `(L, L²)`; treatment enters through the stratified baseline.
fn cox_features(covariates: &[f64], out: &mut Vec<f64>) {
    out.extend_from_slice(covariates);
    out.extend(covariates.iter().map(|x| x * x));
}

fn cox_hazards(dataset: &Dataset, grid: &TimeGrid, positions: &[usize], options: &HazardOptions) -> HazardFit {
    let (n, m, j) = (dataset.len(), grid.len(), dataset.num_causes());
    let p = 2 * dataset.num_covariates();
    let mut x = Vec::with_capacity(n * p);
    for s in dataset.subjects() {
        cox_features(&s.covariates, &mut x);
    }
    let strata: Vec<usize> = dataset.subjects().iter().map(|s| s.treatment as usize).collect();
    let mut hazards = HazardTensor::zeros(n, m, j).with_clamp_margin(options.clamp_margin);
    let mut converged = Vec::with_capacity(j);
    for cause in 1..=j {
        let event: Vec<bool> = dataset.subjects().iter().map(|s| s.event_code == cause).collect();
        let fit = fit_cox(&x, p, positions, &event, &strata, 2, m, options.ridge, 100);
        converged.push(fit.converged);
        for a in 0..2 {
            for i in 0..n {
                let risk = x[i * p..(i + 1) * p].iter().zip(&fit.coefficients).map(|(v, b)| v * b).sum::<f64>().exp();
                for q in 0..m {
                    hazards.set(a, i, q, cause - 1, fit.baseline[a][q] * risk);
                }
            }
        }
    }
    let clamp_hits = hazards.clamp_in_place();
    HazardFit { hazards, mode_used: HazardMode::Cox, converged, fell_back: false, clamp_hits }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceOptions {
    pub propensity: PropensityKind,
    pub propensity_floor: f64,
    /// Floor `κ` applied to the censoring survival.
    pub censoring_floor: f64,
    pub stratify_censoring: bool,
    pub hazard: HazardOptions,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        Self {
            propensity: PropensityKind::EmpiricalProportion,
            propensity_floor: 0.01,
            censoring_floor: 0.01,
            stratify_censoring: true,
            hazard: HazardOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitMetadata {
    pub hazard_mode: HazardMode,
    pub hazard_converged: Vec<bool>,
    pub hazard_fell_back: bool,
    pub hazard_clamp_hits: usize,
    pub propensity_truncated: bool,
    pub censoring_floored: bool,
    pub ridge: f64,
    pub pseudocount: f64,
}

/// Everything the targeting step needs besides the data.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub propensity: PropensityFit,
    /// `π(a | L_i)` per subject, indexed by arm.
    pub propensity_scores: Vec<[f64; 2]>,
    pub censoring: CensoringSurvival,
    pub hazards: HazardTensor,
    pub metadata: FitMetadata,
}

impl NuisanceFit {
    /// Assembles a fit from externally supplied components.
    pub fn from_parts(
        dataset: &Dataset,
        propensity: PropensityFit,
        censoring: CensoringSurvival,
        hazards: HazardTensor,
    ) -> Result<Self> {
        if hazards.n_subjects() != dataset.len() || censoring.n_intervals() != hazards.n_intervals() {
            return Err(Error::InvalidHazards("nuisance components disagree on dimensions".into()));
        }
        hazards.validate()?;
        let propensity_scores =
            dataset.subjects().iter().map(|s| [propensity.predict(0, &s.covariates), propensity.predict(1, &s.covariates)]).collect();
        let metadata = FitMetadata {
            hazard_mode: HazardMode::StratifiedNonparametric,
            hazard_converged: vec![true; hazards.n_causes()],
            hazard_fell_back: false,
            hazard_clamp_hits: 0,
            propensity_truncated: propensity.truncated,
            censoring_floored: censoring.floored,
            ridge: 0.0,
            pseudocount: 0.0,
        };
        Ok(Self { propensity, propensity_scores, censoring, hazards, metadata })
    }
}

pub fn fit_nuisance(dataset: &Dataset, grid: &TimeGrid, options: &NuisanceOptions) -> Result<NuisanceFit> {
    let propensity = fit_propensity(dataset, options.propensity, options.propensity_floor)?;
    let censoring = fit_censoring_survival(dataset, grid, options.stratify_censoring, options.censoring_floor)?;
    let hazard_fit = fit_cause_hazards(dataset, grid, &options.hazard)?;
    let mut fit = NuisanceFit::from_parts(dataset, propensity, censoring, hazard_fit.hazards)?;
    fit.metadata.hazard_mode = hazard_fit.mode_used;
    fit.metadata.hazard_converged = hazard_fit.converged;
    fit.metadata.hazard_fell_back = hazard_fit.fell_back;
    fit.metadata.hazard_clamp_hits = hazard_fit.clamp_hits;
    fit.metadata.ridge = options.hazard.ridge;
    // the Breslow baseline is positive wherever a stratum has events, so no pseudo-events are added
    fit.metadata.pseudocount = if fit.metadata.hazard_mode == HazardMode::Cox { 0.0 } else { options.hazard.pseudocount };
    Ok(fit)
}
