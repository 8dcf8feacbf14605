//! Grid-based nonlinear filtering.
//!
//! The filter splits each observation interval into a deterministic
//! propagation of the unnormalised conditional density (a Kolmogorov-type
//! PDE solved on a truncated cube, independent of the data) and a pointwise
//! exponential correction `exp(hᵀ ΔY)` when the observation increment
//! arrives. Conditional expectations are ratios of grid integrals.
//!
//! Around that core the crate ships the pieces needed to check it:
//! simulation of state/observation paths, Kalman / particle / weighted
//! Monte-Carlo reference estimators, and sweeps over the time step and the
//! domain radius.

pub mod baselines;
pub mod diagnostics;
mod error;
pub mod filter;
pub mod model;
pub mod pde;
pub mod rng;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
pub use filter::{estimate, run_filter, FilterOptions, FilterOutput, YauYauFilter};
pub use model::{
    builtin_model, validate_assumptions, AssumptionProfile, FilterModel, TestFunction,
    TimeSchedule, ValidationReport, BUILTIN_MODELS,
};
pub use pde::{build_grid, DensityField, Grid};
pub use sde::{observation_increments, simulate, ObservationPath, StatePath};
