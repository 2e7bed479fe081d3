//! Along the fluctuation path the log-likelihood rises at rate ‖P_n D*‖,
//! checked with symmetric difference quotients.

#[path = "support/oracles.rs"]
mod oracles;

use targeted_risk::simulation::DgpSpec;
use targeted_risk::{
    build_time_grid, fit_nuisance, simulate_dataset, ArmMode, HazardTensor, NormKind, NormSpec, NuisanceOptions, Quantity,
    TargetSpec, TargetingData,
};

fn check(mode: ArmMode, targets: &[(Quantity, f64)], kind: NormKind) {
    let ds = simulate_dataset(&DgpSpec::competing_risks(250, 11)).unwrap();
    let times: Vec<f64> = targets.iter().map(|t| t.1).collect();
    let grid = build_time_grid(&ds, &times, None).unwrap();
    let nuisance = fit_nuisance(&ds, &grid, &NuisanceOptions::default()).unwrap();
    let data = TargetingData::new(&ds, &grid, &nuisance).unwrap();
    let spec = TargetSpec::new(&grid, 2, mode, targets).unwrap();
    // a biased starting point keeps the score well away from zero
    let fit = &nuisance.hazards;
    let hazards = HazardTensor::from_fn(fit.n_subjects(), fit.n_intervals(), 2, |a, i, q, l| 0.6 * fit.get(a, i, q, l));
    for dx in [1e-2, 1e-3] {
        let probe = oracles::probe_slope(&data, &hazards, &spec, &NormSpec::new(kind), dx);
        assert!(probe.score_norm > 0.0);
        assert_eq!(probe.clamp_hits, 0, "the step should stay inside the hazard bounds");
        assert!(
            probe.relative_error() <= 10.0 * dx,
            "{kind:?} {mode:?} dx={dx}: finite difference {} vs norm {}",
            probe.difference_quotient,
            probe.score_norm
        );
    }
}

const TARGETS: [(Quantity, f64); 4] =
    [(Quantity::Risk(1), 0.6), (Quantity::Risk(2), 0.6), (Quantity::Risk(1), 1.0), (Quantity::Survival, 0.8)];

#[test]
fn identity_norm_single_arm() {
    check(ArmMode::Single(1), &TARGETS, NormKind::Identity);
}

#[test]
fn variance_norm_single_arm() {
    check(ArmMode::Single(0), &TARGETS, NormKind::VarianceDiagonal);
}

#[test]
fn covariance_norm_single_arm() {
    check(ArmMode::Single(1), &TARGETS[..3], NormKind::Covariance);
}

#[test]
fn contrast_under_every_norm() {
    for kind in [NormKind::Identity, NormKind::VarianceDiagonal, NormKind::Covariance] {
        check(ArmMode::Contrast, &TARGETS[..3], kind);
    }
}
