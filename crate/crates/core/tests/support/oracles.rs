//! Reference computations shared by the core tests and the acceptance suite.
//! Each one recomputes a quantity from its definition with plain loops and
//! does not reuse the library's accumulated sums.
#![allow(dead_code)]

use rand::Rng;
use targeted_risk::eif::CleverCovariates;
use targeted_risk::nuisance::{CensoringSurvival, PropensityFit, PropensityModel};
use targeted_risk::targeting::{apply_one_step, log_likelihood, update_direction, Metric};
use targeted_risk::{
    eif_matrix, ArmMode, Dataset, HazardTensor, NormSpec, NuisanceFit, Quantity, RiskCurves, Subject, TargetSpec,
    TargetingData, TimeGrid,
};

pub const J: usize = 2;

/// A tiny problem with every nuisance value given explicitly.
#[derive(Debug, Clone)]
pub struct Instance {
    pub m: usize,
    /// (follow-up index 1..=m, event code 0..=J, arm, covariate)
    pub subjects: Vec<(usize, usize, u8, f64)>,
    /// `[arm][subject][interval][cause]`, each cell total below one.
    pub hazards: Vec<f64>,
    pub censoring: [Vec<f64>; 2],
    pub propensity: [f64; 2],
    pub targets: Vec<(Quantity, usize)>,
    pub mode: ArmMode,
}

impl Instance {
    /// Draws `n ≤ 6` subjects on `M ≤ 3` intervals with two causes.
    pub fn random(rng: &mut impl Rng) -> Self {
        let m = rng.random_range(1..=3usize);
        let n = rng.random_range(1..=6usize);
        let mut subjects: Vec<_> = (0..n)
            .map(|_| (rng.random_range(1..=m), rng.random_range(0..=J), rng.random_range(0..=1u8), rng.random_range(-1.5..1.5)))
            .collect();
        if subjects.iter().all(|s| s.1 == 0) {
            subjects[0].1 = 1;
        }
        let hazards = (0..2 * n * m * J).map(|_| rng.random_range(0.0..0.45)).collect();
        let censoring = [(0..m).map(|_| rng.random_range(0.2..1.0)).collect(), (0..m).map(|_| rng.random_range(0.2..1.0)).collect()];
        let propensity = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let quantities = [Quantity::Risk(1), Quantity::Risk(2), Quantity::Survival];
        let targets =
            (0..rng.random_range(1..=4)).map(|_| (quantities[rng.random_range(0..3)], rng.random_range(1..=m))).collect();
        let mode = [ArmMode::Single(0), ArmMode::Single(1), ArmMode::Contrast][rng.random_range(0..3)];
        Instance { m, subjects, hazards, censoring, propensity, targets, mode }
    }
}

pub struct Built {
    pub dataset: Dataset,
    pub grid: TimeGrid,
    pub nuisance: NuisanceFit,
    pub spec: TargetSpec,
}

pub fn build(inst: &Instance) -> Built {
    let n = inst.subjects.len();
    let subjects = inst
        .subjects
        .iter()
        .enumerate()
        .map(|(i, &(e, code, a, x))| Subject {
            id: i.to_string(),
            covariates: vec![x],
            treatment: a,
            followup_time: e as f64,
            event_code: code,
        })
        .collect();
    let dataset = Dataset::new(subjects, J, inst.m as f64).unwrap();
    let grid = TimeGrid::from_times((1..=inst.m).map(|t| t as f64).collect(), inst.m as f64).unwrap();
    let m = inst.m;
    let hazards = HazardTensor::from_fn(n, m, J, |a, i, q, l| inst.hazards[((a * n + i) * m + q) * J + l]);
    let propensity = PropensityFit {
        model: PropensityModel::Logistic { coefficients: inst.propensity.to_vec() },
        floor: 0.0,
        truncated: false,
    };
    let censoring = CensoringSurvival::from_profiles(n, inst.censoring.clone(), 0.0);
    let nuisance = NuisanceFit::from_parts(&dataset, propensity, censoring, hazards).unwrap();
    let targets: Vec<_> = inst.targets.iter().map(|&(q, p)| (q, p as f64)).collect();
    let spec = TargetSpec::new(&grid, J, inst.mode, &targets).unwrap();
    Built { dataset, grid, nuisance, spec }
}

/// Survival and absolute risks at curve indices `0..=m` by the product limit.
fn curves(h: &HazardTensor, a: usize, i: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = h.n_intervals();
    let mut s = vec![1.0; m + 1];
    let mut f = vec![vec![0.0; m + 1]; J];
    for q in 0..m {
        let mut total = 0.0;
        for l in 0..J {
            let lam = h.get(a, i, q, l);
            total += lam;
            f[l][q + 1] = f[l][q] + s[q] * lam;
        }
        s[q + 1] = s[q] * (1.0 - total);
    }
    (s, f)
}

fn coefficients(quantity: Quantity) -> (f64, [f64; J]) {
    match quantity {
        Quantity::Risk(1) => (0.0, [1.0, 0.0]),
        Quantity::Risk(2) => (0.0, [0.0, 1.0]),
        Quantity::Risk(_) => unreachable!(),
        Quantity::Survival => (1.0, [-1.0, -1.0]),
    }
}

/// `D*(O_i)` for every subject and component, plus the plug-in estimate.
pub fn brute_force(b: &Built) -> (Vec<Vec<f64>>, Vec<f64>) {
    let h = &b.nuisance.hazards;
    let n = b.dataset.len();
    let m = b.grid.len();
    let arms: Vec<(usize, f64)> = match b.spec.mode() {
        ArmMode::Single(a) => vec![(a as usize, 1.0)],
        ArmMode::Contrast => vec![(1, 1.0), (0, -1.0)],
    };
    let d = b.spec.dim();
    let mut plug = vec![vec![0.0; d]; n];
    let mut mart = vec![vec![0.0; d]; n];
    for i in 0..n {
        let subject = &b.dataset.subjects()[i];
        let e = subject.followup_time as usize;
        for &(a, sign) in &arms {
            let (s, f) = curves(h, a, i);
            let pi = b.nuisance.propensity_scores[i][a];
            for (k, comp) in b.spec.components().iter().enumerate() {
                let (c0, c) = coefficients(comp.quantity);
                let tk = comp.point;
                plug[i][k] += sign * (c0 + (0..J).map(|l| c[l] * f[l][tk]).sum::<f64>());
                if subject.treatment as usize != a {
                    continue;
                }
                for q in 0..m {
                    let p = q + 1;
                    let at_risk = q < e;
                    if !at_risk || p > tk {
                        continue;
                    }
                    let weight = 1.0 / (pi * b.nuisance.censoring.get(a, i, q));
                    for l in 0..J {
                        let tail: f64 = (0..J).map(|j| c[j] * (f[j][tk] - f[j][p])).sum();
                        let clever = weight * (c[l] - tail / s[p]);
                        let jump = if q + 1 == e && subject.event_code == l + 1 { 1.0 } else { 0.0 };
                        mart[i][k] += sign * clever * (jump - h.get(a, i, q, l));
                    }
                }
            }
        }
    }
    let psi: Vec<f64> = (0..d).map(|k| plug.iter().map(|r| r[k]).sum::<f64>() / n as f64).collect();
    let rows = (0..n).map(|i| (0..d).map(|k| mart[i][k] + plug[i][k] - psi[k]).collect()).collect();
    (rows, psi)
}

/// `max_k |P_n D*_k| / σ̂_k` from clever covariates evaluated one cell at a
/// time, bypassing the accumulated sums used inside the targeting loop.
pub fn independent_max_ratio(
    ds: &Dataset,
    grid: &TimeGrid,
    fit: &NuisanceFit,
    hazards: &HazardTensor,
    spec: &TargetSpec,
) -> f64 {
    let nuisance = NuisanceFit { hazards: hazards.clone(), ..fit.clone() };
    let clever = CleverCovariates::compute(ds, &nuisance, hazards, spec).unwrap();
    let curves = RiskCurves::compute(hazards).unwrap();
    let positions = grid.followup_indices(ds).unwrap();
    let (n, d, j) = (ds.len(), spec.dim(), hazards.n_causes());
    let arms: Vec<(usize, f64)> = spec.mode().signed_arms();
    let mut mart = vec![vec![0.0; d]; n];
    let mut plug = vec![vec![0.0; d]; n];
    for (i, s) in ds.subjects().iter().enumerate() {
        let a = s.treatment as usize;
        for q in 0..positions[i] {
            for l in 1..=j {
                let jump = (q + 1 == positions[i] && s.event_code == l) as u8 as f64;
                let resid = jump - hazards.get(a, i, q, l - 1);
                for (k, h) in clever.get(i, q, l).iter().enumerate() {
                    mart[i][k] += h * resid;
                }
            }
        }
        for (k, c) in spec.components().iter().enumerate() {
            for &(arm, sign) in &arms {
                plug[i][k] += sign
                    * match c.quantity {
                        Quantity::Survival => curves.survival(arm, i)[c.point],
                        Quantity::Risk(l) => curves.absolute_risk(arm, i, c.point, l),
                    };
            }
        }
    }
    (0..d)
        .map(|k| {
            let psi = plug.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            let col: Vec<f64> = (0..n).map(|i| mart[i][k] + plug[i][k] - psi).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            if sd > 0.0 {
                mean.abs() / sd
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

/// Symmetric difference quotient of the log-likelihood along the update
/// direction at `hazards`, next to the norm of the empirical score.
pub struct SlopeProbe {
    pub difference_quotient: f64,
    pub score_norm: f64,
    pub clamp_hits: usize,
}

impl SlopeProbe {
    pub fn relative_error(&self) -> f64 {
        (self.difference_quotient - self.score_norm).abs() / self.score_norm
    }
}

pub fn probe_slope(data: &TargetingData, hazards: &HazardTensor, spec: &TargetSpec, norm: &NormSpec, dx: f64) -> SlopeProbe {
    let eif = eif_matrix(data, hazards, spec).unwrap();
    let score = eif.column_means();
    let metric = Metric::build(norm, &eif);
    let direction = update_direction(data, hazards, spec, &score, &metric, &vec![false; spec.dim()]).unwrap();
    let (ahead, hits_ahead) = apply_one_step(hazards, &direction.field, dx);
    let (behind, hits_behind) = apply_one_step(hazards, &direction.field, -dx);
    SlopeProbe {
        difference_quotient: (log_likelihood(data, &ahead) - log_likelihood(data, &behind)) / (2.0 * dx),
        score_norm: metric.norm(&score),
        clamp_hits: hits_ahead + hits_behind,
    }
}

/// One update of size `dx` along the current direction.
pub fn advance(data: &TargetingData, hazards: &HazardTensor, spec: &TargetSpec, norm: &NormSpec, dx: f64) -> HazardTensor {
    let eif = eif_matrix(data, hazards, spec).unwrap();
    let score = eif.column_means();
    let metric = Metric::build(norm, &eif);
    let direction = update_direction(data, hazards, spec, &score, &metric, &vec![false; spec.dim()]).unwrap();
    apply_one_step(hazards, &direction.field, dx).0
}
