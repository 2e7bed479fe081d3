//! Simulated designs with Weibull proportional cause-specific hazards, a
//! brute-force truth oracle, the replication harness and the grid-fineness
//! experiment.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_time_grid, Dataset, Subject};
use crate::eif::{eif_matrix, ArmMode, EifMatrix, Quantity, TargetSpec, TargetingData};
use crate::error::{Error, Result};
use crate::inference::{build_cis, influence_covariance, simultaneous_quantile, Interval};
use crate::nuisance::{fit_nuisance, HazardMode, NuisanceOptions};
use crate::targeting::{default_criterion, iterative_tmle, run_one_step_tmle, standardized_scores, NormKind, NormSpec, TargetingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    Survival,
    CompetingRisks,
}

/// `η = intercept + a·A + l1·L_1 + l1_sq·L_1²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub intercept: f64,
    pub a: f64,
    pub l1: f64,
    pub l1_sq: f64,
}

impl LinearPredictor {
    pub fn eval(&self, a: u8, l1: f64) -> f64 {
        self.intercept + self.a * a as f64 + self.l1 * l1 + self.l1_sq * l1 * l1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub weibull_shape: f64,
    pub weibull_scale: f64,
    pub cause1: LinearPredictor,
    pub cause2: LinearPredictor,
    pub treat_prob: f64,
    /// Rate of the exponential censoring time; zero disables censoring.
    pub censoring_rate: f64,
    pub horizon: f64,
    pub n: usize,
    pub seed: u64,
}

impl DgpSpec {
    pub fn survival(n: usize, seed: u64) -> Self {
        Self {
            kind: DgpKind::Survival,
            weibull_shape: 1.5,
            weibull_scale: 1.63,
            cause1: LinearPredictor { intercept: 0.0, a: -0.15, l1: 0.0, l1_sq: 1.2 },
            cause2: LinearPredictor { intercept: 0.4, a: -0.4, l1: 0.7, l1_sq: 0.0 },
            treat_prob: 0.5,
            censoring_rate: 0.24,
            horizon: 1.5,
            n,
            seed,
        }
    }

    pub fn competing_risks(n: usize, seed: u64) -> Self {
        Self { kind: DgpKind::CompetingRisks, horizon: 1.0, ..Self::survival(n, seed) }
    }

    pub fn num_causes(&self) -> usize {
        match self.kind {
            DgpKind::Survival => 1,
            DgpKind::CompetingRisks => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.weibull_shape, self.weibull_scale, self.horizon];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.censoring_rate >= 0.0) {
            return Err(Error::InvalidConfig("Weibull parameters and horizon must be positive, censoring rate non-negative".into()));
        }
        if !(self.treat_prob > 0.0 && self.treat_prob < 1.0) {
            return Err(Error::InvalidConfig(format!("treatment probability {} outside (0, 1)", self.treat_prob)));
        }
        if self.n < 2 {
            return Err(Error::InvalidConfig("at least two subjects are required".into()));
        }
        Ok(())
    }

    /// `exp(η_j)` for each cause.
    pub fn relative_hazards(&self, a: u8, l1: f64) -> Vec<f64> {
        let mut out = vec![self.cause1.eval(a, l1).exp()];
        if self.kind == DgpKind::CompetingRisks {
            out.push(self.cause2.eval(a, l1).exp());
        }
        out
    }

    /// Baseline cumulative hazard `(t/θ)^k`.
    pub fn baseline_cumulative_hazard(&self, t: f64) -> f64 {
        (t / self.weibull_scale).powf(self.weibull_shape)
    }

    /// Event time and cause from a unit exponential `e` and a uniform `u`.
    fn invert(&self, a: u8, l1: f64, e: f64, u: f64) -> (f64, usize) {
        let rel = self.relative_hazards(a, l1);
        let total: f64 = rel.iter().sum();
        let t = self.weibull_scale * (e / total).powf(1.0 / self.weibull_shape);
        let mut acc = 0.0;
        for (j, r) in rel.iter().enumerate() {
            acc += r;
            if u * total < acc {
                return (t, j + 1);
            }
        }
        (t, rel.len())
    }
}

struct Draw {
    l: [f64; 3],
    a: u8,
    e: f64,
    u: f64,
}

fn draw(rng: &mut ChaCha8Rng, treat_prob: f64) -> Draw {
    let l = [rng.random_range(-1.0..1.0), rng.random::<f64>(), rng.random::<f64>()];
    let a = rng.random_bool(treat_prob) as u8;
    let e: f64 = Exp1.sample(rng);
    let u = rng.random::<f64>();
    Draw { l, a, e, u }
}

/// One simulated data set with covariates `(L_1, L_2, L_3)`.
pub fn simulate_dataset(spec: &DgpSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let censoring = (spec.censoring_rate > 0.0).then(|| Exp::new(spec.censoring_rate).expect("positive rate"));
    let subjects = (0..spec.n)
        .map(|i| {
            let d = draw(&mut rng, spec.treat_prob);
            let (t, cause) = spec.invert(d.a, d.l[0], d.e, d.u);
            let c = censoring.map_or(f64::INFINITY, |dist| dist.sample(&mut rng));
            let (time, code) = if t <= c { (t, cause) } else { (c, 0) };
            Subject { id: (i + 1).to_string(), covariates: d.l.to_vec(), treatment: d.a, followup_time: time, event_code: code }
        })
        .collect();
    Dataset::new(subjects, spec.num_causes(), spec.horizon)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub psi: Vec<f64>,
    pub mc_se: Vec<f64>,
}

/// Brute-force truth: uncensored counterfactual outcomes for every arm of the
/// target, sharing covariates and uniforms across arms.
pub fn true_parameter_oracle(spec: &DgpSpec, targets: &[(Quantity, f64)], mode: ArmMode, oracle_n: usize) -> Result<OracleResult> {
    spec.validate()?;
    const BLOCK: usize = 1 << 16;
    let d = targets.len();
    let arms = mode.signed_arms();
    let blocks = oracle_n.div_ceil(BLOCK);
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6f72_6163_6c65);
            rng.set_stream(b as u64);
            let mut sum = vec![0.0; d];
            let mut sq = vec![0.0; d];
            for _ in 0..BLOCK.min(oracle_n - b * BLOCK) {
                let dr = draw(&mut rng, spec.treat_prob);
                let outcomes: Vec<(f64, (f64, usize))> =
                    arms.iter().map(|&(a, s)| (s, spec.invert(a as u8, dr.l[0], dr.e, dr.u))).collect();
                for (k, &(q, t)) in targets.iter().enumerate() {
                    let y: f64 = outcomes
                        .iter()
                        .map(|&(s, (time, cause))| {
                            let hit = match q {
                                Quantity::Risk(j) => time <= t && cause == j,
                                Quantity::Survival => time > t,
                            };
                            s * hit as u8 as f64
                        })
                        .sum();
                    sum[k] += y;
                    sq[k] += y * y;
                }
            }
            (sum, sq)
        })
        .collect();
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for (s, q) in partial {
        for k in 0..d {
            sum[k] += s[k];
            sq[k] += q[k];
        }
    }
    let n = oracle_n as f64;
    let psi: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mc_se = sq.iter().zip(&psi).map(|(q, p)| ((q / n - p * p).max(0.0) / n).sqrt()).collect();
    Ok(OracleResult { psi, mc_se })
}

/// Derives a per-repetition seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A design: data-generating process, targeted components and the reported
/// linear combinations of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub dgp: DgpSpec,
    pub targets: Vec<(Quantity, f64)>,
    pub mode: ArmMode,
    /// Also report survival as minus the sum of the targeted risks at each time.
    pub derived_survival: bool,
}

impl Design {
    /// Ten equally spaced survival contrasts on `[0.1, 1.5]`.
    pub fn survival_ate(n: usize, seed: u64) -> Self {
        let times: Vec<f64> = (0..10).map(|k| 0.1 + 1.4 * k as f64 / 9.0).collect();
        Self {
            dgp: DgpSpec::survival(n, seed),
            targets: times.into_iter().map(|t| (Quantity::Survival, t)).collect(),
            mode: ArmMode::Contrast,
            derived_survival: false,
        }
    }

    /// Cause 1 and cause 2 risk contrasts at 0.6, 0.8 and 1.0.
    pub fn competing_risks_ate(n: usize, seed: u64) -> Self {
        let times = [0.6, 0.8, 1.0];
        let targets = [1, 2].iter().flat_map(|&j| times.iter().map(move |&t| (Quantity::Risk(j), t))).collect();
        Self { dgp: DgpSpec::competing_risks(n, seed), targets, mode: ArmMode::Contrast, derived_survival: true }
    }

    pub fn target_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.targets.iter().map(|x| x.1).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    /// Reported quantities and the matrix mapping targeted to reported values.
    pub fn report(&self) -> (Vec<(Quantity, f64)>, Vec<Vec<f64>>) {
        let d = self.targets.len();
        let mut quantities = self.targets.clone();
        let mut rows: Vec<Vec<f64>> = (0..d).map(|k| (0..d).map(|c| (c == k) as u8 as f64).collect()).collect();
        if self.derived_survival {
            for t in self.target_times() {
                let row: Vec<f64> = self
                    .targets
                    .iter()
                    .map(|&(q, s)| if s == t && matches!(q, Quantity::Risk(_)) { -1.0 } else { 0.0 })
                    .collect();
                quantities.push((Quantity::Survival, t));
                rows.push(row);
            }
        }
        (quantities, rows)
    }
}

pub fn quantity_label(q: Quantity, t: f64) -> String {
    match q {
        Quantity::Risk(j) => format!("F{j}@{t:.3}"),
        Quantity::Survival => format!("S@{t:.3}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    OneStep(NormKind),
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub name: String,
    pub kind: EstimatorKind,
}

impl EstimatorSpec {
    /// `σ_n`-weighted (reference), `Σ_n`-weighted, unweighted and iterative.
    pub fn standard_set() -> Vec<Self> {
        vec![
            Self { name: "sigma-weighted".into(), kind: EstimatorKind::OneStep(NormKind::VarianceDiagonal) },
            Self { name: "Sigma-weighted".into(), kind: EstimatorKind::OneStep(NormKind::Covariance) },
            Self { name: "unweighted".into(), kind: EstimatorKind::OneStep(NormKind::Identity) },
            Self { name: "iterative".into(), kind: EstimatorKind::Iterative },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationConfig {
    pub reps: usize,
    pub estimators: Vec<EstimatorSpec>,
    /// Index into `estimators` of the reference for relative MSE.
    pub reference: usize,
    pub nuisance: NuisanceOptions,
    pub targeting: TargetingConfig,
    pub level: f64,
    pub quantile_draws: usize,
    pub oracle_n: usize,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        let mut nuisance = NuisanceOptions::default();
        nuisance.hazard.mode = HazardMode::PooledLogistic;
        Self {
            reps: 500,
            estimators: EstimatorSpec::standard_set(),
            reference: 0,
            nuisance,
            targeting: TargetingConfig::default(),
            level: 0.95,
            quantile_draws: 20_000,
            oracle_n: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct EstimateRecord {
    psi: Vec<f64>,
    marginal: Vec<Interval>,
    simultaneous: Vec<Interval>,
    converged: bool,
}

/// Applies the reporting map to estimates and EIF columns.
fn reported(eif: &EifMatrix, psi: &[f64], rows: &[Vec<f64>]) -> (Vec<f64>, EifMatrix) {
    let out_psi = rows.iter().map(|r| r.iter().zip(psi).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>();
    let cols: Vec<Vec<f64>> = rows.iter().map(|r| eif.combine(r)).collect();
    let n = eif.n();
    let data: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    let comps = rows.iter().map(|_| eif.components[0]).collect();
    (out_psi.clone(), EifMatrix::from_rows(data, comps, out_psi))
}

fn intervals(eif: &EifMatrix, psi: &[f64], bounds: (f64, f64), level: f64, draws: usize, seed: u64) -> Result<(Vec<Interval>, Vec<Interval>)> {
    let (sd, sigma) = influence_covariance(eif);
    let q = match simultaneous_quantile(&sigma, eif.dim(), level, draws, seed) {
        Ok(q) => q.value,
        Err(Error::Degenerate(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok(build_cis(psi, &sd, q, eif.n(), level, bounds))
}

fn run_estimator(
    kind: EstimatorKind,
    data: &TargetingData,
    initial: &crate::hazard::HazardTensor,
    spec: &TargetSpec,
    config: &ReplicationConfig,
) -> Result<(EifMatrix, bool)> {
    match kind {
        EstimatorKind::OneStep(norm) => {
            let cfg = TargetingConfig { norm: NormSpec::new(norm), ..config.targeting };
            let res = run_one_step_tmle(data, initial, spec, &cfg)?;
            let converged = res.converged();
            Ok((res.eif, converged))
        }
        EstimatorKind::Iterative => {
            let res = iterative_tmle(data, initial, spec, &config.targeting)?;
            let converged = res.converged();
            let n = data.n();
            let rows: Vec<Vec<f64>> = (0..n).map(|i| res.runs.iter().map(|r| r.eif.get(i, 0)).collect()).collect();
            Ok((EifMatrix::from_rows(rows, spec.components().to_vec(), res.psi), converged))
        }
    }
}

fn one_replication(design: &Design, config: &ReplicationConfig, rep: usize, seed: u64) -> Vec<Result<EstimateRecord>> {
    let attempt = || -> Result<Vec<Result<EstimateRecord>>> {
        let dgp = DgpSpec { seed: derive_seed(seed, rep as u64), ..design.dgp.clone() };
        let ds = simulate_dataset(&dgp)?;
        let grid = build_time_grid(&ds, &design.target_times(), None)?;
        let nuisance = fit_nuisance(&ds, &grid, &config.nuisance)?;
        let data = TargetingData::new(&ds, &grid, &nuisance)?;
        let spec = TargetSpec::new(&grid, ds.num_causes(), design.mode, &design.targets)?;
        let (_, rows) = design.report();
        Ok(config
            .estimators
            .iter()
            .map(|e| {
                let (eif, converged) = run_estimator(e.kind, &data, &nuisance.hazards, &spec, config)?;
                let (psi, rep_eif) = reported(&eif, &eif.psi, &rows);
                let (marginal, simultaneous) =
                    intervals(&rep_eif, &psi, spec.bounds(), config.level, config.quantile_draws, derive_seed(dgp.seed, 1))?;
                Ok(EstimateRecord { psi, marginal, simultaneous, converged })
            })
            .collect())
    };
    match attempt() {
        Ok(v) => v,
        Err(e) => config.estimators.iter().map(|_| Err(Error::Degenerate(e.to_string()))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentSummary {
    pub label: String,
    pub truth: f64,
    pub truth_mc_se: f64,
    pub mean: f64,
    pub bias: f64,
    pub mse: f64,
    pub mse_mc_se: f64,
    pub rel_mse: f64,
    pub rel_mse_mc_se: f64,
    pub coverage: f64,
    pub coverage_mc_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub name: String,
    pub components: Vec<ComponentSummary>,
    pub simultaneous_coverage: f64,
    pub simultaneous_coverage_mc_se: f64,
    pub failures: usize,
    pub nonconverged: usize,
}

/// Estimator name, estimates, marginal and simultaneous intervals.
pub type FirstRepIntervals = (String, Vec<f64>, Vec<Interval>, Vec<Interval>);

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationReport {
    pub design: Design,
    pub reps: usize,
    /// Repetitions in which every estimator succeeded; all summaries use these.
    pub reps_used: usize,
    pub labels: Vec<String>,
    pub estimators: Vec<EstimatorSummary>,
    /// Intervals of every estimator on the first usable repetition.
    pub first_rep_intervals: Vec<FirstRepIntervals>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mc_se(v: &[f64]) -> f64 {
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0);
    (var / v.len() as f64).sqrt()
}

pub fn run_replications(design: &Design, config: &ReplicationConfig) -> Result<ReplicationReport> {
    if config.reps < 2 {
        return Err(Error::InvalidConfig("at least 2 repetitions required".into()));
    }
    if config.estimators.is_empty() || config.reference >= config.estimators.len() {
        return Err(Error::InvalidConfig("reference estimator out of range".into()));
    }
    design.dgp.validate()?;
    let (quantities, _) = design.report();
    let truth = true_parameter_oracle(&design.dgp, &quantities, design.mode, config.oracle_n)?;
    let seed = design.dgp.seed;
    let outcomes: Vec<Vec<Result<EstimateRecord>>> =
        (0..config.reps).into_par_iter().map(|r| one_replication(design, config, r, seed)).collect();
    let ne = config.estimators.len();
    let failures: Vec<usize> = (0..ne).map(|e| outcomes.iter().filter(|o| o[e].is_err()).count()).collect();
    let usable: Vec<Vec<&EstimateRecord>> =
        outcomes.iter().filter_map(|o| o.iter().map(|r| r.as_ref().ok()).collect::<Option<Vec<_>>>()).collect();
    if usable.len() < 2 {
        return Err(Error::Degenerate(format!("only {} usable repetitions", usable.len())));
    }
    let k_count = quantities.len();
    let sq_err = |e: usize, k: usize| -> Vec<f64> { usable.iter().map(|u| (u[e].psi[k] - truth.psi[k]).powi(2)).collect() };
    let estimators = (0..ne)
        .map(|e| {
            let components = (0..k_count)
                .map(|k| {
                    let est: Vec<f64> = usable.iter().map(|u| u[e].psi[k]).collect();
                    let se_e = sq_err(e, k);
                    let se_ref = sq_err(config.reference, k);
                    let (mse, mse_ref) = (mean(&se_e), mean(&se_ref));
                    let rel = mse / mse_ref;
                    // delta method on the paired squared errors
                    let lin: Vec<f64> = se_e.iter().zip(&se_ref).map(|(a, b)| (a - rel * b) / mse_ref).collect();
                    let cover: Vec<f64> = usable.iter().map(|u| u[e].marginal[k].contains(truth.psi[k]) as u8 as f64).collect();
                    let coverage = mean(&cover);
                    ComponentSummary {
                        label: quantity_label(quantities[k].0, quantities[k].1),
                        truth: truth.psi[k],
                        truth_mc_se: truth.mc_se[k],
                        mean: mean(&est),
                        bias: mean(&est) - truth.psi[k],
                        mse,
                        mse_mc_se: mc_se(&se_e),
                        rel_mse: rel,
                        rel_mse_mc_se: if e == config.reference { 0.0 } else { mc_se(&lin) },
                        coverage,
                        coverage_mc_se: (coverage * (1.0 - coverage) / usable.len() as f64).sqrt(),
                    }
                })
                .collect();
            let sim: Vec<f64> = usable
                .iter()
                .map(|u| u[e].simultaneous.iter().zip(&truth.psi).all(|(iv, &t)| iv.contains(t)) as u8 as f64)
                .collect();
            let sc = mean(&sim);
            EstimatorSummary {
                name: config.estimators[e].name.clone(),
                components,
                simultaneous_coverage: sc,
                simultaneous_coverage_mc_se: (sc * (1.0 - sc) / usable.len() as f64).sqrt(),
                failures: failures[e],
                nonconverged: usable.iter().filter(|u| !u[e].converged).count(),
            }
        })
        .collect();
    let first_rep_intervals = config
        .estimators
        .iter()
        .zip(&usable[0])
        .map(|(e, r)| (e.name.clone(), r.psi.clone(), r.marginal.clone(), r.simultaneous.clone()))
        .collect();
    Ok(ReplicationReport {
        design: design.clone(),
        reps: config.reps,
        reps_used: usable.len(),
        labels: quantities.iter().map(|&(q, t)| quantity_label(q, t)).collect(),
        estimators,
        first_rep_intervals,
    })
}

impl ReplicationReport {
    /// One row per estimator, one column per reported component.
    pub fn rel_mse_csv(&self) -> String {
        let mut out = String::from("estimator");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for e in &self.estimators {
            out.push_str(&e.name);
            for c in &e.components {
                let _ = write!(out, ",{:.6}", c.rel_mse);
            }
            out.push('\n');
        }
        out
    }

    /// Long format, one row per estimator × component.
    pub fn coverage_csv(&self) -> String {
        let mut out = String::from(
            "estimator,component,truth,truth_mc_se,mean,bias,mse,mse_mc_se,rel_mse,rel_mse_mc_se,coverage,coverage_mc_se,simultaneous_coverage,simultaneous_coverage_mc_se,failures,nonconverged\n",
        );
        for e in &self.estimators {
            for c in &e.components {
                let _ = writeln!(
                    out,
                    "{},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4},{},{}",
                    e.name,
                    c.label,
                    c.truth,
                    c.truth_mc_se,
                    c.mean,
                    c.bias,
                    c.mse,
                    c.mse_mc_se,
                    c.rel_mse,
                    c.rel_mse_mc_se,
                    c.coverage,
                    c.coverage_mc_se,
                    e.simultaneous_coverage,
                    e.simultaneous_coverage_mc_se,
                    e.failures,
                    e.nonconverged
                );
            }
        }
        out
    }

    /// Plot data: estimates and both intervals of the first usable repetition,
    /// with the marginal coverage over all repetitions.
    pub fn interval_plot_csv(&self) -> String {
        let mut out = String::from("estimator,component,truth,psi,marginal_lo,marginal_hi,simultaneous_lo,simultaneous_hi,coverage\n");
        for ((name, psi, marg, sim), summary) in self.first_rep_intervals.iter().zip(&self.estimators) {
            for k in 0..psi.len() {
                let c = &summary.components[k];
                let _ = writeln!(
                    out,
                    "{name},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.4}",
                    c.label, c.truth, psi[k], marg[k].lo, marg[k].hi, sim[k].lo, sim[k].hi, c.coverage
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridExperimentConfig {
    pub dgp: DgpSpec,
    pub grid_sizes: Vec<usize>,
    pub probe_count: usize,
    pub arm: u8,
    pub nuisance: NuisanceOptions,
    pub targeting: TargetingConfig,
}

impl GridExperimentConfig {
    pub fn new(n: usize, seed: u64, grid_sizes: Vec<usize>) -> Self {
        let mut nuisance = NuisanceOptions::default();
        nuisance.hazard.mode = HazardMode::Cox;
        let targeting = TargetingConfig { norm: NormSpec::new(NormKind::Covariance), ..TargetingConfig::default() };
        Self { dgp: DgpSpec::survival(n, seed), grid_sizes, probe_count: 100, arm: 1, nuisance, targeting }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub size: usize,
    pub fraction_solved: f64,
    /// Largest probe ratio `|P_n D*_t|/σ̂_t` divided by the criterion.
    pub worst_ratio: f64,
    pub converged: bool,
    pub steps: usize,
}

/// Targets the treatment-specific survival curve on grids of each size and
/// checks the score equation at random probe times off the grid.
pub fn grid_fineness_experiment(config: &GridExperimentConfig) -> Result<Vec<GridRow>> {
    if config.grid_sizes.is_empty() || config.grid_sizes.contains(&0) {
        return Err(Error::InvalidConfig("grid sizes must be a non-empty list of positive integers".into()));
    }
    if config.probe_count == 0 {
        return Err(Error::InvalidConfig("at least one probe time is required".into()));
    }
    let ds = simulate_dataset(&config.dgp)?;
    let tau = ds.horizon();
    let curve_times = |g: usize| -> Vec<f64> { (1..=g).map(|k| tau * k as f64 / g as f64).collect() };
    let mut all: Vec<f64> = config.grid_sizes.iter().flat_map(|&g| curve_times(g)).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let grid = build_time_grid(&ds, &all, None)?;
    let nuisance = fit_nuisance(&ds, &grid, &config.nuisance)?;
    let data = TargetingData::new(&ds, &grid, &nuisance)?;
    let j = ds.num_causes();
    let mode = ArmMode::Single(config.arm);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.dgp.seed, 0x70726f6265));
    let probes: Vec<usize> = (0..config.probe_count).map(|_| grid.floor_index(rng.random::<f64>() * tau)).collect();
    let probe_times: Vec<f64> = probes.iter().filter(|&&p| p > 0).map(|&p| grid.times()[p - 1]).collect();
    let criterion = config.targeting.criterion.unwrap_or_else(|| default_criterion(ds.len()));
    config
        .grid_sizes
        .iter()
        .map(|&g| {
            let spec = TargetSpec::curve(&grid, j, mode, Quantity::Survival, &curve_times(g))?;
            let result = run_one_step_tmle(&data, &nuisance.hazards, &spec, &config.targeting)?;
            // probes before the first grid point sit where S ≡ 1 and D* ≡ 0
            let mut ratios = vec![0.0; probes.len() - probe_times.len()];
            if !probe_times.is_empty() {
                let probe_spec = TargetSpec::curve(&grid, j, mode, Quantity::Survival, &probe_times)?;
                ratios.extend(standardized_scores(&eif_matrix(&data, &result.state.hazards, &probe_spec)?));
            }
            let solved = ratios.iter().filter(|&&r| r <= criterion).count();
            Ok(GridRow {
                size: g,
                fraction_solved: solved as f64 / ratios.len() as f64,
                worst_ratio: ratios.iter().copied().fold(0.0, f64::max) / criterion,
                converged: result.converged(),
                steps: result.steps,
            })
        })
        .collect()
}

pub fn grid_rows_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("grid_size,fraction_solved,worst_case_ratio,converged,steps\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.4},{:.4},{},{}", r.size, r.fraction_solved, r.worst_ratio, r.converged, r.steps);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let spec = DgpSpec::competing_risks(50, 3);
        assert_eq!(simulate_dataset(&spec).unwrap(), simulate_dataset(&spec).unwrap());
    }

    #[test]
    fn no_censoring_long_horizon_all_events() {
        let spec = DgpSpec { censoring_rate: 0.0, horizon: 1e6, ..DgpSpec::survival(200, 1) };
        assert!(simulate_dataset(&spec).unwrap().subjects().iter().all(|s| s.event_code >= 1));
    }

    #[test]
    fn zero_hazard_dgp_has_zero_truth() {
        // a huge scale pushes every event past the target time
        let spec = DgpSpec { weibull_scale: 1e12, ..DgpSpec::survival(10, 1) };
        let o = true_parameter_oracle(&spec, &[(Quantity::Risk(1), 1.0)], ArmMode::Single(1), 100_000).unwrap();
        assert_eq!(o.psi, vec![0.0]);
    }

    #[test]
    fn single_cause_truth_complements() {
        let spec = DgpSpec::survival(10, 4);
        let o = true_parameter_oracle(&spec, &[(Quantity::Risk(1), 0.7), (Quantity::Survival, 0.7)], ArmMode::Single(0), 100_000)
            .unwrap();
        assert!((o.psi[0] + o.psi[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seeds_are_distinct() {
        let s: std::collections::BTreeSet<u64> = (0..1000).map(|i| derive_seed(7, i)).collect();
        assert_eq!(s.len(), 1000);
    }

    #[test]
    fn rejects_single_repetition() {
        let cfg = ReplicationConfig { reps: 1, ..ReplicationConfig::default() };
        assert!(matches!(run_replications(&Design::survival_ate(50, 1), &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn report_adds_derived_survival() {
        let (q, rows) = Design::competing_risks_ate(10, 1).report();
        assert_eq!(q.len(), 9);
        assert_eq!(rows[6], vec![-1.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
    }
}
