//! One-step targeted maximum likelihood estimation of treatment-specific
//! absolute-risk and survival curves from right-censored, competing-risks
//! data in discrete time.

mod cox;
pub mod data;
pub mod eif;
pub mod error;
pub mod hazard;
pub mod inference;
mod logistic;
pub mod nuisance;
pub mod simulation;
pub mod targeting;

pub use data::{build_time_grid, parse_dataset, validate_dataset, CsvSchema, Dataset, DiagnosticsReport, Subject, TimeGrid};
pub use eif::{eif_matrix, plugin_estimates, ArmMode, Component, EifMatrix, Quantity, TargetSpec, TargetingData};
pub use error::{Error, Result};
pub use hazard::{absolute_risk_curve, survival_curve, HazardTensor, RiskCurves};
pub use nuisance::{fit_nuisance, NuisanceFit, NuisanceOptions};
pub use targeting::{iterative_tmle, run_one_step_tmle, NormKind, NormSpec, StateTable, TargetingConfig, TmleResult};
pub use inference::{EstimationResult, InferenceOptions, Interval};
pub use simulation::{simulate_dataset, DgpSpec, Design};
