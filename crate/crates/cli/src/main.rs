//! `targeted-risk`: targeted estimation of treatment-specific absolute risks
//! and survival curves, with simulation and grid experiments.
//!
//! Exit status: 0 success, 1 invalid input or configuration, 2 positivity
//! violation, 3 targeting did not converge (reports are still written).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand};
use targeted_risk::inference::DEFAULT_QUANTILE_DRAWS;
use targeted_risk::nuisance::{HazardMode, PropensityKind};
use targeted_risk::simulation::DgpKind;
use targeted_risk::{ArmMode, InferenceOptions, NormKind, NormSpec, TargetingConfig};

use commands::{EstimateSettings, GridSettings, SimulateSettings, Status};
use config::{parse_hazard, parse_norm, parse_propensity, parse_sizes, parse_times, validate_sizes, Causes, FileConfig};
use output::Outputs;

const DEFAULT_OUT: &str = "targeted-risk-out";
const DEFAULT_SEED: u64 = 1;

#[derive(Parser)]
#[command(name = "targeted-risk", version, about = "One-step targeted estimation of absolute risk and survival curves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate absolute risks from a CSV file.
    Estimate(EstimateFlags),
    /// Run the replication study on a simulated design.
    Simulate(SimulateFlags),
    /// Check score equations off the grid for increasingly fine grids.
    GridExperiment(GridFlags),
}

#[derive(Args)]
struct CommonFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TargetingFlags {
    /// identity, variance or covariance.
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    dx0: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Stopping threshold for the standardized scores (default 1/(√n log n)).
    #[arg(long)]
    criterion: Option<f64>,
    /// Initial hazard model: stratified, pooled-logistic or cox.
    #[arg(long)]
    hazard: Option<String>,
}

#[derive(Args)]
struct EstimateFlags {
    #[command(flatten)]
    common: CommonFlags,
    #[command(flatten)]
    targeting: TargetingFlags,
    /// CSV with columns id,time,event,treatment,x1,…,xp.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Horizon τ; follow-up beyond it is censored at τ.
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated target times (default: ten event-time quantiles).
    #[arg(long)]
    times: Option<String>,
    #[arg(long, conflicts_with = "contrast")]
    arm: Option<u8>,
    /// Target the difference arm 1 minus arm 0.
    #[arg(long)]
    contrast: bool,
    /// `all` or a comma-separated list of cause codes.
    #[arg(long)]
    causes: Option<String>,
    /// `iterative` adds the per-component targeting baseline.
    #[arg(long)]
    baseline: Option<String>,
    /// Propensity model: empirical or logistic.
    #[arg(long)]
    propensity: Option<String>,
    #[arg(long)]
    level: Option<f64>,
    /// Monte Carlo draws for the simultaneous quantile.
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Args)]
struct SimulateFlags {
    #[command(flatten)]
    common: CommonFlags,
    #[command(flatten)]
    targeting: TargetingFlags,
    /// survival or competing-risks.
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    draws: Option<usize>,
    /// Sample size of the Monte Carlo truth.
    #[arg(long)]
    oracle_n: Option<usize>,
}

#[derive(Args)]
struct GridFlags {
    #[command(flatten)]
    common: CommonFlags,
    #[command(flatten)]
    targeting: TargetingFlags,
    #[arg(long)]
    dgp: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated, strictly increasing grid sizes.
    #[arg(long)]
    grid_sizes: Option<String>,
    /// Number of random probe times.
    #[arg(long)]
    probes: Option<usize>,
    #[arg(long)]
    arm: Option<u8>,
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn parse_dgp(raw: &str) -> Result<DgpKind> {
    match raw {
        "survival" => Ok(DgpKind::Survival),
        "competing-risks" => Ok(DgpKind::CompetingRisks),
        other => bail!("unknown design `{other}` (expected survival or competing-risks)"),
    }
}

fn parse_arm(arm: u8) -> Result<u8> {
    if arm > 1 {
        bail!("--arm must be 0 or 1, got {arm}");
    }
    Ok(arm)
}

fn targeting_config(flags: &TargetingFlags, file: &FileConfig, default_norm: NormKind) -> Result<TargetingConfig> {
    let norm = match pick(flags.norm.clone(), file.norm.clone()) {
        Some(raw) => parse_norm(&raw)?,
        None => default_norm,
    };
    let defaults = TargetingConfig::default();
    let config = TargetingConfig {
        norm: NormSpec::new(norm),
        dx0: pick(flags.dx0, file.dx0).unwrap_or(defaults.dx0),
        max_steps: pick(flags.max_steps, file.max_steps).unwrap_or(defaults.max_steps),
        criterion: pick(flags.criterion, file.criterion),
        ..defaults
    };
    if !(config.dx0.is_finite() && config.dx0 > 0.0) {
        bail!("--dx0 must be positive");
    }
    if let Some(c) = config.criterion {
        if !(c.is_finite() && c > 0.0) {
            bail!("--criterion must be positive");
        }
    }
    Ok(config)
}

fn hazard_mode(flags: &TargetingFlags, file: &FileConfig) -> Result<Option<HazardMode>> {
    pick(flags.hazard.clone(), file.hazard.clone()).map(|raw| parse_hazard(&raw)).transpose()
}

fn level(flag: Option<f64>, file: &FileConfig) -> Result<f64> {
    let level = pick(flag, file.level).unwrap_or(0.95);
    if !(level > 0.0 && level < 1.0) {
        bail!("--level must lie in (0, 1)");
    }
    Ok(level)
}

fn positive(name: &str, value: usize) -> Result<usize> {
    if value == 0 {
        bail!("--{name} must be positive");
    }
    Ok(value)
}

fn resolve_estimate(flags: &EstimateFlags, file: &FileConfig) -> Result<EstimateSettings> {
    let input = pick(flags.input.clone(), file.input.clone()).ok_or_else(|| anyhow!("--input is required"))?;
    let tau = pick(flags.tau, file.tau).ok_or_else(|| anyhow!("--tau is required"))?;
    if !(tau.is_finite() && tau > 0.0) {
        bail!("--tau must be positive");
    }
    let times = match (&flags.times, &file.times) {
        (Some(raw), _) => Some(parse_times(raw)?),
        (None, Some(list)) => Some(parse_times(&list.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","))?),
        (None, None) => None,
    };
    let mode = if flags.contrast {
        ArmMode::Contrast
    } else if let Some(arm) = flags.arm {
        ArmMode::Single(parse_arm(arm)?)
    } else {
        match (file.contrast.unwrap_or(false), file.arm) {
            (true, Some(_)) => bail!("the config file sets both `arm` and `contrast`"),
            (true, None) => ArmMode::Contrast,
            (false, arm) => ArmMode::Single(parse_arm(arm.unwrap_or(1))?),
        }
    };
    let causes = Causes::parse(&pick(flags.causes.clone(), file.causes.clone()).unwrap_or_else(|| "all".into()))?;
    let iterative = match pick(flags.baseline.clone(), file.baseline.clone()).as_deref() {
        None | Some("none") => false,
        Some("iterative") => true,
        Some(other) => bail!("unknown baseline `{other}` (expected iterative)"),
    };
    let propensity = match pick(flags.propensity.clone(), file.propensity.clone()) {
        Some(raw) => parse_propensity(&raw)?,
        None => PropensityKind::Logistic,
    };
    Ok(EstimateSettings {
        input,
        tau,
        times,
        mode,
        causes,
        targeting: targeting_config(&flags.targeting, file, NormKind::VarianceDiagonal)?,
        iterative,
        hazard: hazard_mode(&flags.targeting, file)?.unwrap_or(HazardMode::PooledLogistic),
        propensity,
        inference: InferenceOptions {
            level: level(flags.level, file)?,
            draws: positive("draws", pick(flags.draws, file.draws).unwrap_or(DEFAULT_QUANTILE_DRAWS))?,
            seed: pick(flags.common.seed, file.seed).unwrap_or(DEFAULT_SEED),
        },
    })
}

fn resolve_simulate(flags: &SimulateFlags, file: &FileConfig) -> Result<SimulateSettings> {
    let dgp = parse_dgp(&pick(flags.dgp.clone(), file.dgp.clone()).unwrap_or_else(|| "survival".into()))?;
    let reps = pick(flags.reps, file.reps).unwrap_or(500);
    if reps < 2 {
        bail!("at least 2 repetitions are required, got {reps}");
    }
    let n = pick(flags.n, file.n).unwrap_or(200);
    if n < 2 {
        bail!("--n must be at least 2");
    }
    Ok(SimulateSettings {
        dgp,
        n,
        reps,
        seed: pick(flags.common.seed, file.seed).unwrap_or(DEFAULT_SEED),
        hazard: hazard_mode(&flags.targeting, file)?.unwrap_or(HazardMode::PooledLogistic),
        targeting: targeting_config(&flags.targeting, file, NormKind::VarianceDiagonal)?,
        level: level(flags.level, file)?,
        draws: positive("draws", pick(flags.draws, file.draws).unwrap_or(20_000))?,
        oracle_n: positive("oracle-n", pick(flags.oracle_n, file.oracle_n).unwrap_or(1_000_000))?,
    })
}

fn resolve_grid(flags: &GridFlags, file: &FileConfig) -> Result<GridSettings> {
    let sizes = match (&flags.grid_sizes, &file.grid_sizes) {
        (Some(raw), _) => parse_sizes(raw)?,
        (None, Some(list)) => {
            validate_sizes(list)?;
            list.clone()
        }
        (None, None) => vec![20, 40, 80, 100, 120],
    };
    let n = pick(flags.n, file.n).unwrap_or(1000);
    if n < 2 {
        bail!("--n must be at least 2");
    }
    let norm = pick(flags.targeting.norm.clone(), file.norm.clone()).map(|raw| parse_norm(&raw)).transpose()?;
    if flags.targeting.dx0.is_some() || flags.targeting.criterion.is_some() {
        bail!("--dx0 and --criterion are not used by grid-experiment");
    }
    Ok(GridSettings {
        dgp: parse_dgp(&pick(flags.dgp.clone(), file.dgp.clone()).unwrap_or_else(|| "survival".into()))?,
        n,
        seed: pick(flags.common.seed, file.seed).unwrap_or(DEFAULT_SEED),
        sizes,
        probes: positive("probes", pick(flags.probes, file.probes).unwrap_or(100))?,
        arm: parse_arm(pick(flags.arm, file.arm).unwrap_or(1))?,
        hazard: hazard_mode(&flags.targeting, file)?,
        norm,
        max_steps: pick(flags.targeting.max_steps, file.max_steps),
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<targeted_risk::Error>() {
        Some(targeted_risk::Error::Positivity(_)) => 2,
        _ => 1,
    }
}

fn finish(outputs: &Outputs, dir: &std::path::Path) -> Result<()> {
    for path in outputs.write(dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    let file = FileConfig::from_env()?;
    let common = match &cli.command {
        Command::Estimate(f) => &f.common,
        Command::Simulate(f) => &f.common,
        Command::GridExperiment(f) => &f.common,
    };
    let out = pick(common.out.clone(), file.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let threads = pick(common.threads, file.threads);
    // every setting is validated before the thread pool or any computation starts
    enum Resolved {
        Estimate(EstimateSettings),
        Simulate(SimulateSettings),
        Grid(GridSettings),
    }
    let resolved = match &cli.command {
        Command::Estimate(f) => Resolved::Estimate(resolve_estimate(f, &file)?),
        Command::Simulate(f) => Resolved::Simulate(resolve_simulate(f, &file)?),
        Command::GridExperiment(f) => Resolved::Grid(resolve_grid(f, &file)?),
    };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(positive("threads", t)?).build_global()?;
    }
    match resolved {
        Resolved::Estimate(s) => {
            let (outputs, status) = commands::estimate(&s)?;
            finish(&outputs, &out)?;
            if status == Status::NotConverged {
                eprintln!("targeting stopped before every score equation was solved");
                return Ok(3);
            }
        }
        Resolved::Simulate(s) => finish(&commands::simulate(&s)?, &out)?,
        Resolved::Grid(s) => finish(&commands::grid_experiment(&s)?, &out)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
