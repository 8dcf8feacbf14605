use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::model::MAX_DIM;

/// Tensor-product grid on the cube `[-R, R]^d` with `M` (odd) nodes per
/// axis. Node `idx` has axis indices in row-major order, axis 0 slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    radius: f64,
    points: usize,
    spacing: f64,
    axis: Vec<f64>,
    strides: [usize; MAX_DIM],
    boundary: Vec<bool>,
}

pub fn build_grid(dim: usize, radius: f64, points: usize) -> Result<Arc<Grid>> {
    Grid::new(dim, radius, points).map(Arc::new)
}

impl Grid {
    pub fn new(dim: usize, radius: f64, points: usize) -> Result<Self> {
        ensure!(
            (1..=MAX_DIM).contains(&dim),
            "grid dimension {dim} unsupported (1..={MAX_DIM})"
        );
        ensure!(radius.is_finite() && radius > 0.0, "grid radius must be positive");
        ensure!(points % 2 == 1, "points per axis must be odd, got {points}");
        ensure!(points >= 5, "points per axis must be >= 5, got {points}");
        let spacing = 2.0 * radius / (points - 1) as f64;
        let centre = (points - 1) / 2;
        let axis = (0..points)
            .map(|i| match i {
                0 => -radius,
                i if i == points - 1 => radius,
                i => (i as f64 - centre as f64) * spacing,
            })
            .collect();
        let mut strides = [0; MAX_DIM];
        for a in 0..dim {
            strides[a] = points.pow((dim - 1 - a) as u32);
        }
        let n = points.pow(dim as u32);
        let mut grid = Self {
            dim,
            radius,
            points,
            spacing,
            axis,
            strides,
            boundary: Vec::new(),
        };
        grid.boundary = (0..n)
            .map(|idx| {
                grid.axis_indices(idx)[..dim]
                    .iter()
                    .any(|&i| i == 0 || i == points - 1)
            })
            .collect();
        Ok(grid)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn points_per_axis(&self) -> usize {
        self.points
    }
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn node_count(&self) -> usize {
        self.boundary.len()
    }
    /// Radius of the largest ball inside the cube.
    pub fn inscribed_radius(&self) -> f64 {
        self.radius
    }
    pub fn axis(&self) -> &[f64] {
        &self.axis
    }
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }
    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    #[inline]
    pub fn axis_indices(&self, idx: usize) -> [usize; MAX_DIM] {
        let mut out = [0; MAX_DIM];
        let mut rem = idx;
        for a in 0..self.dim {
            out[a] = rem / self.strides[a];
            rem %= self.strides[a];
        }
        out
    }

    #[inline]
    pub fn node_point(&self, idx: usize, out: &mut [f64]) {
        let ii = self.axis_indices(idx);
        for a in 0..self.dim {
            out[a] = self.axis[ii[a]];
        }
    }

    #[inline]
    pub fn is_boundary(&self, idx: usize) -> bool {
        self.boundary[idx]
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }

    /// Tensor trapezoid weight of node `idx`.
    #[inline]
    pub fn quadrature_weight(&self, idx: usize) -> f64 {
        let ii = self.axis_indices(idx);
        let mut w = self.cell_volume();
        for &i in &ii[..self.dim] {
            if i == 0 || i == self.points - 1 {
                w *= 0.5;
            }
        }
        w
    }

    /// Same spacing, `factor` times more cells per axis.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        ensure!(factor >= 1, "refinement factor must be >= 1");
        Self::new(self.dim, self.radius, (self.points - 1) * factor + 1)
    }

    /// Iterator over node coordinates, reusing one buffer.
    pub fn for_each_node(&self, mut f: impl FnMut(usize, &[f64])) {
        let mut x = [0.0; MAX_DIM];
        for idx in 0..self.node_count() {
            self.node_point(idx, &mut x);
            f(idx, &x[..self.dim]);
        }
    }
}

/// `s(t) = t³(10 - 15t + 6t²)`, the C² smoothstep on `[0, 1]`.
#[inline]
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

/// Cutoff equal to 1 for `|x| <= R - 1/R`, 0 for `|x| >= R`, smoothstep of
/// the normalised distance `(R - |x|) R` in between.
pub fn mollifier_value(norm: f64, radius: f64) -> f64 {
    let inner = radius - 1.0 / radius;
    if norm <= inner {
        1.0
    } else if norm >= radius {
        0.0
    } else {
        smoothstep((radius - norm) * radius)
    }
}

/// The cutoff sampled at every node. Requires `R > 1`.
pub fn mollifier(grid: &Grid) -> Result<Vec<f64>> {
    ensure!(grid.radius > 1.0, "mollifier needs R > 1, got {}", grid.radius);
    let mut out = vec![0.0; grid.node_count()];
    grid.for_each_node(|idx, x| {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        out[idx] = mollifier_value(r, grid.radius);
    });
    Ok(out)
}
