//! Standard errors, marginal intervals and simultaneous bands from the
//! stacked influence function.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::eif::{ArmMode, Component, EifMatrix, Quantity, TargetSpec};
use crate::error::{Error, Result};
use crate::targeting::TmleResult;

pub const DEFAULT_QUANTILE_DRAWS: usize = 100_000;
const CHUNK: usize = 4096;

/// `σ̂_k = √(P_n D_k²)` and `Σ̂ = P_n D Dᵀ` (row-major).
pub fn influence_covariance(eif: &EifMatrix) -> (Vec<f64>, Vec<f64>) {
    let sigma = eif.second_moment_matrix();
    let d = eif.dim();
    let sd = (0..d).map(|k| sigma[k * d + k].max(0.0).sqrt()).collect();
    (sd, sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimultaneousQuantile {
    pub value: f64,
    /// Components with zero variance, left out of the maximum.
    pub excluded: Vec<usize>,
}

/// Monte Carlo `level`-quantile of `max_k |Z_k|` for `Z ~ N(0, corr(Σ̂))`.
///
/// Draws are split into fixed chunks, each with its own ChaCha stream, so the
/// result depends only on the seed and not on the thread count.
pub fn simultaneous_quantile(sigma: &[f64], d: usize, level: f64, draws: usize, seed: u64) -> Result<SimultaneousQuantile> {
    if sigma.len() != d * d {
        return Err(Error::InvalidConfig(format!("covariance has {} entries, expected {}", sigma.len(), d * d)));
    }
    if !(level > 0.0 && level < 1.0) || draws == 0 {
        return Err(Error::InvalidConfig("level must lie in (0, 1) with at least one draw".into()));
    }
    let keep: Vec<usize> = (0..d).filter(|&k| sigma[k * d + k] > 0.0).collect();
    let excluded: Vec<usize> = (0..d).filter(|k| !keep.contains(k)).collect();
    if keep.is_empty() {
        return Err(Error::Degenerate("every component has zero variance".into()));
    }
    let r = keep.len();
    let corr = DMatrix::from_fn(r, r, |a, b| {
        let (ka, kb) = (keep[a], keep[b]);
        sigma[ka * d + kb] / (sigma[ka * d + ka] * sigma[kb * d + kb]).sqrt()
    });
    let eig = SymmetricEigen::new(corr);
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let root: Vec<f64> = root.transpose().iter().copied().collect(); // row-major r × r
    let chunks = draws.div_ceil(CHUNK);
    let mut maxima: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = CHUNK.min(draws - c * CHUNK);
            let mut z = vec![0.0; r];
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                let mut max: f64 = 0.0;
                for a in 0..r {
                    let x: f64 = root[a * r..(a + 1) * r].iter().zip(&z).map(|(w, v)| w * v).sum();
                    max = max.max(x.abs());
                }
                out.push(max);
            }
            out
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    let idx = ((level * draws as f64).ceil() as usize).clamp(1, draws) - 1;
    Ok(SimultaneousQuantile { value: maxima[idx], excluded })
}

/// Standard normal quantile `z_{(1+level)/2}`.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    /// Whether either end was cut back to the parameter bounds.
    pub truncated: bool,
}

impl Interval {
    pub fn wald(center: f64, half_width: f64, bounds: (f64, f64)) -> Self {
        let (lo, hi) = (center - half_width, center + half_width);
        Self { lo: lo.max(bounds.0), hi: hi.min(bounds.1), truncated: lo < bounds.0 || hi > bounds.1 }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Marginal intervals `ψ̂ ± z σ̂/√n` and simultaneous ones `ψ̂ ± q̃ σ̂/√n`.
pub fn build_cis(psi: &[f64], sd: &[f64], q: f64, n: usize, level: f64, bounds: (f64, f64)) -> (Vec<Interval>, Vec<Interval>) {
    let z = normal_quantile(level);
    let root_n = (n as f64).sqrt();
    let marginal = psi.iter().zip(sd).map(|(&p, &s)| Interval::wald(p, z * s / root_n, bounds)).collect();
    let simultaneous = psi.iter().zip(sd).map(|(&p, &s)| Interval::wald(p, q * s / root_n, bounds)).collect();
    (marginal, simultaneous)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InferenceOptions {
    pub level: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { level: 0.95, draws: DEFAULT_QUANTILE_DRAWS, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub steps: usize,
    pub final_scores: Vec<f64>,
    pub final_ratios: Vec<f64>,
    pub criterion: f64,
    pub clamp_hits: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationResult {
    pub components: Vec<Component>,
    pub mode: ArmMode,
    pub n: usize,
    pub psi: Vec<f64>,
    pub se: Vec<f64>,
    /// `Σ̂`, row-major.
    pub sigma: Vec<f64>,
    pub ci_marginal: Vec<Interval>,
    pub ci_simultaneous: Vec<Interval>,
    pub q_simultaneous: f64,
    pub excluded_from_band: Vec<usize>,
    pub diagnostics: Diagnostics,
    pub seed: u64,
}

impl EstimationResult {
    pub fn from_eif(eif: &EifMatrix, spec: &TargetSpec, diagnostics: Diagnostics, options: &InferenceOptions) -> Result<Self> {
        let n = eif.n();
        let (sd, sigma) = influence_covariance(eif);
        let quantile = match simultaneous_quantile(&sigma, eif.dim(), options.level, options.draws, options.seed) {
            Ok(q) => q,
            // all-degenerate EIF: intervals collapse onto the estimates
            Err(Error::Degenerate(_)) => SimultaneousQuantile { value: normal_quantile(options.level), excluded: (0..eif.dim()).collect() },
            Err(e) => return Err(e),
        };
        let (ci_marginal, ci_simultaneous) = build_cis(&eif.psi, &sd, quantile.value, n, options.level, spec.bounds());
        let root_n = (n as f64).sqrt();
        Ok(Self {
            components: spec.components().to_vec(),
            mode: spec.mode(),
            n,
            psi: eif.psi.clone(),
            se: sd.iter().map(|s| s / root_n).collect(),
            sigma,
            ci_marginal,
            ci_simultaneous,
            q_simultaneous: quantile.value,
            excluded_from_band: quantile.excluded,
            diagnostics,
            seed: options.seed,
        })
    }

    pub fn from_tmle(result: &TmleResult, spec: &TargetSpec, options: &InferenceOptions) -> Result<Self> {
        let diagnostics = Diagnostics {
            steps: result.steps,
            final_scores: result.final_scores(),
            final_ratios: result.final_ratios.clone(),
            criterion: result.criterion,
            clamp_hits: result.state.clamp_hits,
            converged: result.converged(),
        };
        Self::from_eif(&result.eif, spec, diagnostics, options)
    }

    /// The machine-readable report.
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        let arm = match self.mode {
            ArmMode::Single(a) => json!(a),
            ArmMode::Contrast => json!("contrast"),
        };
        let estimates: Vec<_> = self
            .components
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let cause = match c.quantity {
                    Quantity::Risk(j) => json!(j),
                    Quantity::Survival => json!("survival"),
                };
                json!({
                    "cause": cause,
                    "time": c.time,
                    "arm": arm,
                    "psi": self.psi[k],
                    "se": self.se[k],
                    "ci_marginal": [self.ci_marginal[k].lo, self.ci_marginal[k].hi],
                    "ci_simultaneous": [self.ci_simultaneous[k].lo, self.ci_simultaneous[k].hi],
                })
            })
            .collect();
        json!({
            "estimates": estimates,
            "q_simultaneous": self.q_simultaneous,
            "convergence": {
                "steps": self.diagnostics.steps,
                "converged": self.diagnostics.converged,
                "final_scores": self.diagnostics.final_scores,
                "criterion": self.diagnostics.criterion,
            },
            "seed": self.seed,
        })
    }
}
