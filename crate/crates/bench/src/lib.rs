//! Fixtures for the benchmarks in `benches/`.

use targeted_risk::nuisance::HazardMode;
use targeted_risk::{
    build_time_grid, fit_nuisance, simulate_dataset, ArmMode, DgpSpec, NuisanceFit, NuisanceOptions, Quantity, TargetSpec,
    TargetingData,
};

/// A fitted competing-risks problem with every cause and the survival
/// curve targeted jointly at `times`.
pub struct Fixture {
    pub nuisance: NuisanceFit,
    pub data: TargetingData,
    pub spec: TargetSpec,
}

pub fn competing_risks(n: usize, seed: u64, times: &[f64], mode: ArmMode) -> Fixture {
    let ds = simulate_dataset(&DgpSpec::competing_risks(n, seed)).expect("simulated data");
    let grid = build_time_grid(&ds, times, None).expect("grid");
    let mut options = NuisanceOptions::default();
    options.hazard.mode = HazardMode::PooledLogistic;
    let nuisance = fit_nuisance(&ds, &grid, &options).expect("nuisance fit");
    let data = TargetingData::new(&ds, &grid, &nuisance).expect("targeting data");
    let targets: Vec<(Quantity, f64)> = times
        .iter()
        .flat_map(|&t| [(Quantity::Risk(1), t), (Quantity::Risk(2), t), (Quantity::Survival, t)])
        .collect();
    let spec = TargetSpec::new(&grid, 2, mode, &targets).expect("target spec");
    Fixture { nuisance, data, spec }
}
