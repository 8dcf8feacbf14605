//! Offline stage: grid, cutoff, discrete generator and the propagation /
//! exponential-update primitives.

mod field;
mod generator;
mod grid;
pub mod solver;

pub use field::{
    discretize_initial, exp_update, integrate, mass, trapezoid, DensityField, NodeObservations,
    Scaled,
};
pub use generator::{
    assemble_generator, assemble_transport, propagate, DiscreteGenerator, PropagationStats,
    Propagator, SOLVER_TOLERANCE,
};
pub use grid::{build_grid, mollifier, mollifier_value, Grid};
