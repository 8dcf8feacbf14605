//! Functionals of a single density field.

use crate::error::{ensure, Result};
use crate::model::MAX_DIM;
use crate::pde::{mass, trapezoid, DensityField, Grid};

/// Sub-samples per axis when a dual cell straddles the sphere `|x| = r`.
const CELL_SUBSAMPLES: usize = 16;

/// Fraction of the dual cell of the node at `x` lying in `|x| >= r`.
fn outside_fraction(x: &[f64], h: f64, r: f64) -> f64 {
    let d = x.len();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let half_diag = 0.5 * h * (d as f64).sqrt();
    if norm - half_diag >= r {
        return 1.0;
    }
    if norm + half_diag < r {
        return 0.0;
    }
    let n = CELL_SUBSAMPLES;
    let total = n.pow(d as u32);
    let mut hits = 0usize;
    let mut y = [0.0; MAX_DIM];
    for flat in 0..total {
        let mut rem = flat;
        for a in 0..d {
            let i = rem % n;
            rem /= n;
            y[a] = x[a] + h * ((i as f64 + 0.5) / n as f64 - 0.5);
        }
        if y[..d].iter().map(|v| v * v).sum::<f64>() >= r * r {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

/// Normalised mass in `|x| >= r`. Nodes whose cells straddle the sphere
/// contribute the fraction of their cell outside it.
pub fn tail_mass(field: &DensityField, r: f64) -> Result<f64> {
    let grid: &Grid = field.grid();
    ensure!(
        r > 0.0 && r <= grid.inscribed_radius(),
        "tail radius {r} must lie in (0, {}]",
        grid.inscribed_radius()
    );
    let total = mass(field).mantissa;
    ensure!(total > 0.0, "tail mass of a zero field");
    let h = grid.spacing();
    let tail = trapezoid(grid, field.values(), |x| outside_fraction(x, h, r));
    Ok(tail / total)
}

/// Normalised `∫ |x|^order · field / ∫ field` for even `order >= 2`.
pub fn moment(field: &DensityField, order: u32) -> Result<f64> {
    ensure!(order >= 2 && order % 2 == 0, "moment order must be even and >= 2, got {order}");
    let total = mass(field).mantissa;
    ensure!(total > 0.0, "moment of a zero field");
    let n = (order / 2) as i32;
    let num = trapezoid(field.grid(), field.values(), |x| x.iter().map(|v| v * v).sum::<f64>().powi(n));
    Ok(num / total)
}
