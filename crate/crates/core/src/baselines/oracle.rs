//! Self-oracle: the grid filter on a refined time step and grid, read back
//! at the coarse knots.

use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::filter::{run_filter, FilterOutput};
use crate::model::{FilterModel, TestFunction};
use crate::pde::Grid;
use crate::sde::ObservationPath;

/// Runs the filter with step `δ_fine = obs.delta()` on `grid.refine(space_factor)`
/// and keeps every `time_factor`-th knot. With both factors 1 this is
/// exactly [`run_filter`].
pub fn fine_oracle(
    model: &FilterModel,
    grid: &Grid,
    obs: &ObservationPath,
    tests: &[TestFunction],
    time_factor: usize,
    space_factor: usize,
    substeps: usize,
) -> Result<FilterOutput> {
    ensure!(
        time_factor >= 1 && space_factor >= 1,
        "refinement factors must be >= 1"
    );
    let fine_grid = Arc::new(grid.refine(space_factor)?);
    let out = run_filter(model, &fine_grid, obs.schedule(), obs, tests, substeps)?;
    out.subsample(time_factor)
}
