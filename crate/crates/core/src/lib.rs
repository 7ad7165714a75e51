//! Staggered-adoption difference-in-differences estimation.
//!
//! This crate implements four estimators for panels where treatment rolls
//! out to clusters at different times and stays on: group-time effects via
//! outcome regression / inverse probability weighting / doubly robust
//! combination, the interaction-weighted saturated event study, two-stage
//! residualization, and the pooled Mundlak regression — together with the
//! estimand aggregation weights that turn group-time effects into event-time
//! and overall summaries, cluster-bootstrap inference with sup-t bands, a
//! synthetic panel generator, and a Monte-Carlo benchmark engine scoring
//! bias, MSE and coverage.
//!
//! Entry points:
//! - [`panel::validate_panel`] / [`panel::read_panel_csv`] build a validated
//!   balanced panel; [`panel::derive_cohorts`] derives first-treatment
//!   cohorts and shares.
//! - [`methods::estimate_effects`] runs any estimator on any supported
//!   estimand with bootstrap or delta-method uncertainty.
//! - [`simgen::generate`] draws synthetic panels with exact truth tables;
//!   [`benchmark::run_benchmark`] scores estimators over a scenario grid.

pub mod aggregate;
pub mod benchmark;
pub mod cs;
pub mod error;
pub mod kernels;
pub mod methods;
pub mod mundlak;
pub mod panel;
mod rngstream;
pub mod simgen;
pub mod sunab;
pub mod twostage;

pub use aggregate::{
    aggregate as aggregate_cells, cluster_bootstrap, simultaneous_bands, BootstrapSpec,
    EffectRow, EffectTable, WeightKind, WeightScheme,
};
pub use error::{Error, Result};
pub use methods::{estimate_effects, Inference, Method};
pub use panel::{
    derive_cohorts, validate_panel, Cohort, CohortMap, ControlGroup, CovariateKind,
    CovariateMeta, EstimandKind, EstimandSpec, PanelDataset, PanelRecord,
};
pub use rngstream::stream_rng;
pub use simgen::{generate, scenario_presets, Scenario, SimConfig, TruthTable};
