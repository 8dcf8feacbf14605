//! Checks of the filter's qualitative guarantees: tail and moment bounds,
//! non-explosion of the L⁴ norm, and convergence in the time step and the
//! domain radius.

mod checks;
mod fields;
mod sweep;

pub use checks::{
    exp_moment_lemma_check, l4_stability_check, moment_growth_check, observation_paths,
    pde_l4_growth_check, CheckOptions, ExpMomentReport, ExpMomentRow, L4GrowthReport, L4Report,
    MomentGrowthReport, ObservationLaw, EXPONENT_FLOOR, STABILITY_TOLERANCE,
};
pub use fields::{moment, tail_mass};
pub use sweep::{
    convergence_sweep, radius_sweep, LongRow, Oracle, RadiusSweep, SweepOptions, SweepResult,
    SweepRow, AGGREGATION_TOLERANCE, HALVING_FACTOR, SLOPE_BAND, TAIL_BOUND_FACTOR,
};
