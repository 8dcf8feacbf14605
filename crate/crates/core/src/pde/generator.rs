use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use super::field::{DensityField, NodeObservations};
use super::grid::Grid;
use super::solver::{bicgstab, Csr, Tridiagonal};
use crate::error::{ensure, Error, Result};
use crate::model::{FilterModel, MAX_DIM};

/// Finite-difference form of
/// `u ↦ ½ Σ ∂ᵢ∂ⱼ(aⁱʲ u) − Σ ∂ᵢ(fᵢ u) − ½|h|² u` with zero Dirichlet data.
///
/// Products are differenced in conservative form, so every interior column
/// of the transport part sums to zero.
#[derive(Debug, Clone)]
pub struct DiscreteGenerator {
    grid: Arc<Grid>,
    matrix: Csr,
}

impl DiscreteGenerator {
    /// The zero operator on `grid`.
    pub fn zero(grid: Arc<Grid>) -> Self {
        let n = grid.node_count();
        Self {
            grid,
            matrix: Csr::zeros(n),
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn matrix(&self) -> &Csr {
        &self.matrix
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        self.matrix.mul_into(u, out)
    }

    /// Smallest substep count for which every diagonal entry of the
    /// explicit Crank–Nicolson factor `I + (δ/2s)A` is nonnegative.
    ///
    /// Below it, nodes where `|A_ii|` is large (a steep potential `½|h|²`
    /// near the boundary) change sign in every substep and the clamp
    /// removes the undershoot.
    pub fn positivity_substeps(&self, delta: f64) -> usize {
        let worst = self
            .matrix
            .diagonal()
            .iter()
            .fold(0.0f64, |m, d| m.max(-d));
        ((delta * worst / 2.0).ceil() as usize).max(1)
    }
}

struct NodeCoefficients {
    a: Vec<f64>,
    f: Vec<f64>,
}

/// Assembles the generator. Refuses if `a` is not uniformly elliptic with
/// the model's declared constant at some interior node.
pub fn assemble_generator(model: &FilterModel, grid: &Arc<Grid>) -> Result<DiscreteGenerator> {
    let h = NodeObservations::new(model, grid)?;
    assemble_with_potential(model, grid, |idx| -0.5 * h.norm_squared(idx))
}

/// As [`assemble_generator`] with the potential term switched off.
pub fn assemble_transport(model: &FilterModel, grid: &Arc<Grid>) -> Result<DiscreteGenerator> {
    assemble_with_potential(model, grid, |_| 0.0)
}

fn assemble_with_potential(
    model: &FilterModel,
    grid: &Arc<Grid>,
    potential: impl Fn(usize) -> f64,
) -> Result<DiscreteGenerator> {
    let d = grid.dim();
    ensure!(
        model.dim() == d,
        "model dimension {} differs from grid dimension {d}",
        model.dim()
    );
    let n = grid.node_count();
    let mut coeff = NodeCoefficients {
        a: vec![0.0; n * d * d],
        f: vec![0.0; n * d],
    };
    let lambda = model.assumptions().ellipticity;
    let mut failure = None;
    grid.for_each_node(|idx, x| {
        if failure.is_some() {
            return;
        }
        let a = &mut coeff.a[idx * d * d..(idx + 1) * d * d];
        model.diffusion_square(x, a);
        let f = &mut coeff.f[idx * d..(idx + 1) * d];
        model.drift(x, f);
        if !a.iter().chain(f.iter()).all(|v| v.is_finite()) {
            failure = Some(Error::NonFinite {
                coefficient: "drift/diffusion",
                point: x.to_vec(),
            });
            return;
        }
        if !grid.is_boundary(idx) {
            let m = DMatrix::from_row_slice(d, d, a);
            let min_eig = ((&m + m.transpose()) * 0.5).symmetric_eigenvalues().min();
            if min_eig < lambda * (1.0 - 1e-9) {
                failure = Some(Error::EllipticityViolated {
                    node: idx,
                    point: x.to_vec(),
                    min_eigenvalue: min_eig,
                    lambda,
                });
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    let dx = grid.spacing();
    let inv_dx2 = 1.0 / (dx * dx);
    let inv_2dx = 0.5 / dx;
    let a_at = |node: usize, i: usize, j: usize| coeff.a[node * d * d + i * d + j];
    let f_at = |node: usize, i: usize| coeff.f[node * d + i];

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for p in 0..n {
        if grid.is_boundary(p) {
            rows.push(Vec::new());
            continue;
        }
        let mut row = Vec::with_capacity(1 + 4 * d + 2 * d * d);
        let pot = potential(p);
        if !pot.is_finite() {
            let mut x = [0.0; MAX_DIM];
            grid.node_point(p, &mut x);
            return Err(Error::NonFinite {
                coefficient: "observation",
                point: x[..d].to_vec(),
            });
        }
        row.push((p, pot));
        for i in 0..d {
            let si = grid.stride(i);
            let (plus, minus) = (p + si, p - si);
            // ½ ∂ᵢ²(aⁱⁱ u)
            row.push((plus, 0.5 * a_at(plus, i, i) * inv_dx2));
            row.push((minus, 0.5 * a_at(minus, i, i) * inv_dx2));
            row.push((p, -a_at(p, i, i) * inv_dx2));
            // −∂ᵢ(fᵢ u)
            row.push((plus, -f_at(plus, i) * inv_2dx));
            row.push((minus, f_at(minus, i) * inv_2dx));
            // Σ_{i<j} ∂ᵢ∂ⱼ(aⁱʲ u), the symmetric pair counted once
            for j in i + 1..d {
                let sj = grid.stride(j);
                let c = 0.25 * inv_dx2;
                for (q, sign) in [
                    (p + si + sj, 1.0),
                    (p + si - sj, -1.0),
                    (p - si + sj, -1.0),
                    (p - si - sj, 1.0),
                ] {
                    row.push((q, sign * c * a_at(q, i, j)));
                }
            }
        }
        // boundary columns multiply zero data
        row.retain(|(c, _)| !grid.is_boundary(*c));
        rows.push(row);
    }
    Ok(DiscreteGenerator {
        grid: grid.clone(),
        matrix: Csr::from_rows(n, rows),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PropagationStats {
    /// Quadrature mass of the negative undershoot removed by clamping.
    pub clamped_mass: f64,
    /// Smallest nodal value before clamping.
    pub min_value: f64,
    pub solver_iterations: usize,
}

enum Implicit {
    Banded(Tridiagonal),
    Iterative { matrix: Csr, inv_diag: Vec<f64> },
}

/// Crank–Nicolson semigroup `S_δ` with `substeps` internal steps: solves
/// `(I − θA) v⁺ = (I + θA) v` with `θ = δ / (2 substeps)`.
pub struct Propagator {
    grid: Arc<Grid>,
    explicit: Csr,
    implicit: Implicit,
    substeps: usize,
    delta: f64,
}

pub const SOLVER_TOLERANCE: f64 = 1e-10;

impl Propagator {
    pub fn new(generator: &DiscreteGenerator, delta: f64, substeps: usize) -> Result<Self> {
        ensure!(delta > 0.0 && delta.is_finite(), "δ must be positive");
        ensure!(substeps >= 1, "substeps must be >= 1");
        let theta = delta / (2.0 * substeps as f64);
        let explicit = generator.matrix.shifted_identity(theta);
        let lhs = generator.matrix.shifted_identity(-theta);
        let implicit = if generator.grid.dim() == 1 && lhs.is_tridiagonal() {
            Implicit::Banded(Tridiagonal::factor(&lhs)?)
        } else {
            let inv_diag = lhs.diagonal().iter().map(|v| 1.0 / v).collect();
            Implicit::Iterative {
                matrix: lhs,
                inv_diag,
            }
        };
        Ok(Self {
            grid: generator.grid.clone(),
            explicit,
            implicit,
            substeps,
            delta,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Advances `field` by `δ` in place; negative undershoot is clamped
    /// after the final substep and reported.
    pub fn advance(&self, field: &mut DensityField) -> Result<PropagationStats> {
        ensure!(
            Arc::ptr_eq(field.grid(), &self.grid) || **field.grid() == *self.grid,
            "field and generator live on different grids"
        );
        let n = self.grid.node_count();
        let mut rhs = vec![0.0; n];
        let mut iterations = 0;
        for _ in 0..self.substeps {
            self.explicit.mul_into(&field.values, &mut rhs);
            match &self.implicit {
                Implicit::Banded(lu) => {
                    lu.solve(&mut rhs);
                    std::mem::swap(&mut field.values, &mut rhs);
                }
                Implicit::Iterative { matrix, inv_diag } => {
                    // previous state is the initial guess
                    iterations += bicgstab(
                        matrix,
                        inv_diag,
                        &rhs,
                        &mut field.values,
                        SOLVER_TOLERANCE,
                        20 * self.grid.points_per_axis() + 200,
                    )?;
                }
            }
        }
        let mut stats = PropagationStats {
            min_value: f64::INFINITY,
            solver_iterations: iterations,
            ..Default::default()
        };
        for (idx, v) in field.values.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteField);
            }
            if self.grid.is_boundary(idx) {
                *v = 0.0;
                continue;
            }
            stats.min_value = stats.min_value.min(*v);
            if *v < 0.0 {
                stats.clamped_mass -= *v * self.grid.quadrature_weight(idx);
                *v = 0.0;
            }
        }
        Ok(stats)
    }

    pub fn apply(&self, field: &DensityField) -> Result<(DensityField, PropagationStats)> {
        let mut out = field.clone();
        let stats = self.advance(&mut out)?;
        Ok((out, stats))
    }
}

/// One-off propagation; the filter builds a [`Propagator`] once instead.
pub fn propagate(
    generator: &DiscreteGenerator,
    field: &DensityField,
    delta: f64,
    substeps: usize,
) -> Result<(DensityField, PropagationStats)> {
    Propagator::new(generator, delta, substeps)?.apply(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, FilterModel};
    use crate::pde::field::{discretize_initial, mass};
    use crate::pde::grid::build_grid;

    fn const_model(f: f64, h_on: bool) -> FilterModel {
        let b = FilterModel::builder("c", 1)
            .drift(move |_, o| o[0] = f)
            .diffusion(1, |_, o| o[0] = 1.0);
        if h_on {
            b.observation(1, |x, o| o[0] = x[0]).build().unwrap()
        } else {
            b.build().unwrap()
        }
    }

    #[test]
    fn laplacian_stencil() {
        let g = build_grid(1, 2.0, 9).unwrap();
        let dx = g.spacing();
        let gen = assemble_generator(&const_model(0.0, false), &g).unwrap();
        let a = gen.matrix();
        let c = 4;
        assert!((a.get(c, c - 1) - 0.5 / (dx * dx)).abs() < 1e-12);
        assert!((a.get(c, c) + 1.0 / (dx * dx)).abs() < 1e-12);
        assert!((a.get(c, c + 1) - 0.5 / (dx * dx)).abs() < 1e-12);
        assert_eq!(a.row(0).0.len(), 0);
        assert_eq!(a.row(8).0.len(), 0);
    }

    #[test]
    fn drift_stencil() {
        let g = build_grid(1, 2.0, 9).unwrap();
        let dx = g.spacing();
        let base = assemble_generator(&const_model(0.0, false), &g).unwrap();
        let gen = assemble_generator(&const_model(1.0, false), &g).unwrap();
        let c = 4;
        let diff = |j| gen.matrix().get(c, j) - base.matrix().get(c, j);
        assert!((diff(c - 1) - 0.5 / dx).abs() < 1e-12);
        assert!(diff(c).abs() < 1e-12);
        assert!((diff(c + 1) + 0.5 / dx).abs() < 1e-12);
    }

    #[test]
    fn potential_on_diagonal() {
        let g = build_grid(1, 2.0, 9).unwrap();
        let base = assemble_generator(&const_model(0.0, false), &g).unwrap();
        let gen = assemble_generator(&const_model(0.0, true), &g).unwrap();
        for (idx, x) in g.axis().iter().enumerate().skip(1).take(7) {
            let d = gen.matrix().get(idx, idx) - base.matrix().get(idx, idx);
            assert!((d + 0.5 * x * x).abs() < 1e-12);
        }
    }

    #[test]
    fn transport_columns_sum_to_zero_in_the_interior() {
        let g = build_grid(2, 3.0, 21).unwrap();
        let m = FilterModel::builder("rot", 2)
            .drift(|x, o| {
                o[0] = -x[1] + 0.3 * x[0].sin();
                o[1] = x[0];
            })
            .diffusion(2, |x, o| {
                o[0] = 1.0 + 0.1 * x[0].cos();
                o[1] = 0.2;
                o[2] = 0.1;
                o[3] = 1.2;
            })
            .assumptions(crate::model::AssumptionProfile::new(2.0, 0.5, 2, 1, 1.0).unwrap())
            .build()
            .unwrap();
        let gen = assemble_transport(&m, &g).unwrap();
        let sums = gen.matrix().column_sums();
        let mut checked = 0;
        for idx in 0..g.node_count() {
            let ii = g.axis_indices(idx);
            if ii[..2].iter().all(|&i| (2..19).contains(&i)) {
                assert!(sums[idx].abs() < 1e-9, "column {idx}: {}", sums[idx]);
                checked += 1;
            }
        }
        assert!(checked > 200);
    }

    #[test]
    fn degenerate_diffusion_refused() {
        let g = build_grid(1, 2.0, 9).unwrap();
        let m = FilterModel::builder("frozen", 1)
            .diffusion(1, |_, o| o[0] = 0.0)
            .build()
            .unwrap();
        assert!(matches!(
            assemble_generator(&m, &g),
            Err(Error::EllipticityViolated { .. })
        ));
    }

    #[test]
    fn positivity_substeps_follow_the_steepest_row() {
        let g = build_grid(1, 6.0, 241).unwrap();
        let cubic = assemble_generator(&builtin_model("cubic_sensor").unwrap(), &g).unwrap();
        // interior extreme node x = 5.95: a/Δx² + x⁶/2
        let worst = 1.0 / 0.0025 + 5.95f64.powi(6) / 2.0;
        assert_eq!(cubic.positivity_substeps(1e-3), (1e-3 * worst / 2.0).ceil() as usize);
        let heat = assemble_generator(&FilterModel::builder("heat", 1).build().unwrap(), &g).unwrap();
        assert_eq!(heat.positivity_substeps(1e-3), 1);
    }

    #[test]
    fn zero_generator_is_identity() {
        let g = build_grid(1, 6.0, 61).unwrap();
        let f = discretize_initial(&builtin_model("linear1d").unwrap(), &g).unwrap();
        let (out, stats) = propagate(&DiscreteGenerator::zero(g), &f, 0.5, 3).unwrap();
        assert_eq!(out, f);
        assert_eq!(stats.clamped_mass, 0.0);
    }

    #[test]
    fn absorbing_boundary_loses_mass() {
        let g = build_grid(1, 3.0, 61).unwrap();
        let f = DensityField::from_fn(g.clone(), |x| (-(x[0] - 2.6f64).powi(2) / 0.02).exp()).unwrap();
        let gen = assemble_generator(&const_model(0.0, false), &g).unwrap();
        let (out, _) = propagate(&gen, &f, 0.1, 10).unwrap();
        assert!(mass(&out).value() < mass(&f).value());
    }

    #[test]
    fn two_dimensional_heat_kernel() {
        let g = build_grid(2, 6.0, 61).unwrap();
        let m = FilterModel::builder("heat", 2).build().unwrap();
        let gen = assemble_generator(&m, &g).unwrap();
        let s2 = 1.0;
        let t = 0.2;
        let f = DensityField::from_fn(g.clone(), |x| {
            (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2)
        })
        .unwrap();
        let (out, stats) = propagate(&gen, &f, t, 8).unwrap();
        assert!(stats.solver_iterations > 0);
        let v = s2 + t;
        let centre = g.node_count() / 2;
        let exact = 1.0 / (2.0 * std::f64::consts::PI * v);
        assert!((out.values()[centre] - exact).abs() / exact < 5e-3);
    }
}
