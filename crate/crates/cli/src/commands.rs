use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde_json::json;
use targeted_risk::nuisance::{HazardMode, PropensityKind};
use targeted_risk::simulation::{
    grid_fineness_experiment, grid_rows_csv, run_replications, DgpKind, GridExperimentConfig, ReplicationConfig,
};
use targeted_risk::{
    build_time_grid, fit_nuisance, iterative_tmle, parse_dataset, run_one_step_tmle, validate_dataset, ArmMode, CsvSchema,
    Dataset, Design, DgpSpec, EstimationResult, HazardTensor, InferenceOptions, NormKind, NormSpec, NuisanceOptions, Quantity,
    StateTable, TargetSpec, TargetingConfig, TargetingData, TimeGrid,
};

use crate::config::Causes;
use crate::output::Outputs;

/// Number of target times chosen when none are given.
pub const DEFAULT_TIME_COUNT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    NotConverged,
}

#[derive(Debug, Clone)]
pub struct EstimateSettings {
    pub input: PathBuf,
    pub tau: f64,
    pub times: Option<Vec<f64>>,
    pub mode: ArmMode,
    pub causes: Causes,
    pub targeting: TargetingConfig,
    pub iterative: bool,
    pub hazard: HazardMode,
    pub propensity: PropensityKind,
    pub inference: InferenceOptions,
}

/// Observed event times at evenly spaced empirical quantiles `k/(K+1)`.
pub fn default_times(dataset: &Dataset, count: usize) -> Result<Vec<f64>> {
    let mut events: Vec<f64> = dataset
        .subjects()
        .iter()
        .filter(|s| s.event_code > 0 && s.followup_time <= dataset.horizon())
        .map(|s| s.followup_time)
        .collect();
    if events.is_empty() {
        bail!("no events before the horizon to place default target times");
    }
    events.sort_by(f64::total_cmp);
    let m = events.len();
    let mut times: Vec<f64> = (1..=count)
        .map(|k| {
            let rank = (k as f64 * m as f64 / (count + 1) as f64).ceil() as usize;
            events[rank.clamp(1, m) - 1]
        })
        .collect();
    times.dedup();
    Ok(times)
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn time_header(first: &str, times: &[f64]) -> String {
    let mut out = first.to_string();
    for t in times {
        let _ = write!(out, ",t={}", fmt(*t));
    }
    out.push('\n');
    out
}

fn push_row(out: &mut String, label: &str, values: &[f64]) {
    out.push_str(label);
    for v in values {
        let _ = write!(out, ",{}", fmt(*v));
    }
    out.push('\n');
}

/// Rows `F_1..F_J`, `S` and `sum` at the target times.
fn state_rows(table: &StateTable, grid: &TimeGrid, times: &[f64]) -> Vec<(String, Vec<f64>)> {
    let idx: Vec<usize> = times.iter().map(|&t| grid.point_index(t).expect("target times are grid points")).collect();
    let mut rows: Vec<(String, Vec<f64>)> =
        table.risk.iter().enumerate().map(|(j, r)| (format!("F{}", j + 1), idx.iter().map(|&p| r[p]).collect())).collect();
    rows.push(("S".into(), idx.iter().map(|&p| table.survival[p]).collect()));
    let sum = (0..idx.len()).map(|k| rows.iter().map(|r| r.1[k]).sum()).collect();
    rows.push(("sum".into(), sum));
    rows
}

fn state_table_csv(hazards: &HazardTensor, grid: &TimeGrid, mode: ArmMode, times: &[f64]) -> String {
    let mut out = time_header("arm,row", times);
    let mut per_arm = Vec::new();
    for (arm, _) in mode.signed_arms() {
        let rows = state_rows(&StateTable::compute(hazards, grid, arm), grid, times);
        for (label, values) in &rows {
            push_row(&mut out, &format!("{arm},{label}"), values);
        }
        per_arm.push(rows);
    }
    if let [treated, control] = per_arm.as_slice() {
        for ((label, a), (_, b)) in treated.iter().zip(control) {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            push_row(&mut out, &format!("contrast,{label}"), &diff);
        }
    }
    out
}

/// Separately targeted `F_1..F_J` and `S` at each time, with their sum.
fn iterative_table_csv(psi: &[f64], spec: &TargetSpec, times: &[f64], num_causes: usize) -> String {
    let value = |q: Quantity, t: f64| -> f64 {
        let k = spec.components().iter().position(|c| c.quantity == q && c.time == t).expect("component present");
        psi[k]
    };
    let mut rows: Vec<(String, Vec<f64>)> = (1..=num_causes)
        .map(|j| (format!("F{j}"), times.iter().map(|&t| value(Quantity::Risk(j), t)).collect()))
        .collect();
    rows.push(("S".into(), times.iter().map(|&t| value(Quantity::Survival, t)).collect()));
    let sum = (0..times.len()).map(|k| rows.iter().map(|r| r.1[k]).sum()).collect();
    rows.push(("sum".into(), sum));
    let mut out = time_header("row", times);
    for (label, values) in &rows {
        push_row(&mut out, label, values);
    }
    out
}

pub fn estimate(settings: &EstimateSettings) -> Result<(Outputs, Status)> {
    let file =
        std::fs::File::open(&settings.input).with_context(|| format!("opening input {}", settings.input.display()))?;
    let dataset = parse_dataset(file, &CsvSchema::standard(settings.tau))
        .with_context(|| format!("reading {}", settings.input.display()))?;
    let screen = validate_dataset(&dataset, None);
    for w in &screen.warnings {
        eprintln!("warning: {w}");
    }
    let mut times = match &settings.times {
        Some(t) => t.clone(),
        None => default_times(&dataset, DEFAULT_TIME_COUNT)?,
    };
    times.sort_by(f64::total_cmp);
    times.dedup();
    if let Some(t) = times.iter().find(|&&t| t > settings.tau) {
        bail!("target time {t} exceeds the horizon {}", settings.tau);
    }
    let j = dataset.num_causes();
    let causes = settings.causes.resolve(j)?;

    let grid = build_time_grid(&dataset, &times, None)?;
    let mut options = NuisanceOptions { propensity: settings.propensity, ..NuisanceOptions::default() };
    options.hazard.mode = settings.hazard;
    let nuisance = fit_nuisance(&dataset, &grid, &options)?;
    let data = TargetingData::new(&dataset, &grid, &nuisance)?;
    let spec = TargetSpec::absolute_risks(&grid, j, settings.mode, &causes, &times)?;
    let result = run_one_step_tmle(&data, &nuisance.hazards, &spec, &settings.targeting)?;
    let estimation = EstimationResult::from_tmle(&result, &spec, &settings.inference)?;

    let mut report = estimation.to_json();
    report["termination"] = serde_json::to_value(result.termination)?;
    report["data"] = json!({
        "n": dataset.len(),
        "causes": j,
        "horizon": settings.tau,
        "screen": screen,
    });
    report["nuisance"] = serde_json::to_value(&nuisance.metadata)?;

    let mut outputs = Outputs::default();
    outputs.add_table("state_table", state_table_csv(&result.state.hazards, &grid, settings.mode, &times));
    if settings.iterative {
        let targets: Vec<(Quantity, f64)> = times
            .iter()
            .flat_map(|&t| (1..=j).map(move |c| (Quantity::Risk(c), t)).chain(std::iter::once((Quantity::Survival, t))))
            .collect();
        let it_spec = TargetSpec::new(&grid, j, settings.mode, &targets)?;
        let baseline = iterative_tmle(&data, &nuisance.hazards, &it_spec, &settings.targeting)?;
        if !baseline.converged() {
            eprintln!("warning: the iterative baseline did not converge for every component");
        }
        report["iterative"] = json!({
            "converged": baseline.converged(),
            "steps": baseline.runs.iter().map(|r| r.steps).collect::<Vec<_>>(),
        });
        outputs.add_table("iterative_table", iterative_table_csv(&baseline.psi, &it_spec, &times, j));
    }
    outputs.add("estimate.json", serde_json::to_string_pretty(&report)? + "\n");
    let status = if result.converged() { Status::Converged } else { Status::NotConverged };
    Ok((outputs, status))
}

#[derive(Debug, Clone)]
pub struct SimulateSettings {
    pub dgp: DgpKind,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub hazard: HazardMode,
    pub targeting: TargetingConfig,
    pub level: f64,
    pub draws: usize,
    pub oracle_n: usize,
}

pub fn simulate(settings: &SimulateSettings) -> Result<Outputs> {
    let design = match settings.dgp {
        DgpKind::Survival => Design::survival_ate(settings.n, settings.seed),
        DgpKind::CompetingRisks => Design::competing_risks_ate(settings.n, settings.seed),
    };
    let mut config = ReplicationConfig {
        reps: settings.reps,
        targeting: settings.targeting,
        level: settings.level,
        quantile_draws: settings.draws,
        oracle_n: settings.oracle_n,
        ..ReplicationConfig::default()
    };
    config.nuisance.hazard.mode = settings.hazard;
    let report = run_replications(&design, &config)?;
    let mut outputs = Outputs::default();
    outputs.add_table("rel_mse", report.rel_mse_csv());
    outputs.add_table("coverage", report.coverage_csv());
    outputs.add("intervals.csv", report.interval_plot_csv());
    outputs.add("report.json", serde_json::to_string_pretty(&report)? + "\n");
    Ok(outputs)
}

#[derive(Debug, Clone)]
pub struct GridSettings {
    pub dgp: DgpKind,
    pub n: usize,
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub probes: usize,
    pub arm: u8,
    pub hazard: Option<HazardMode>,
    pub norm: Option<NormKind>,
    pub max_steps: Option<usize>,
}

pub fn grid_experiment(settings: &GridSettings) -> Result<Outputs> {
    let mut config = GridExperimentConfig::new(settings.n, settings.seed, settings.sizes.clone());
    if settings.dgp == DgpKind::CompetingRisks {
        config.dgp = DgpSpec::competing_risks(settings.n, settings.seed);
    }
    config.probe_count = settings.probes;
    config.arm = settings.arm;
    if let Some(mode) = settings.hazard {
        config.nuisance.hazard.mode = mode;
    }
    if let Some(kind) = settings.norm {
        config.targeting.norm = NormSpec::new(kind);
    }
    if let Some(steps) = settings.max_steps {
        config.targeting.max_steps = steps;
    }
    let rows = grid_fineness_experiment(&config)?;
    for row in rows.iter().filter(|r| !r.converged) {
        eprintln!("warning: targeting on the grid of size {} stopped before convergence", row.size);
    }
    let mut outputs = Outputs::default();
    outputs.add_table("grid_experiment", grid_rows_csv(&rows));
    outputs.add("grid_experiment.json", serde_json::to_string_pretty(&json!({ "config": config, "rows": rows }))? + "\n");
    Ok(outputs)
}
