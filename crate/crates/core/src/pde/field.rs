use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use super::grid::{mollifier, Grid};
use crate::error::{ensure, Error, Result};
use crate::model::{FilterModel, TestFunction, MAX_DIM};

/// A quantity `mantissa * e^{log_scale}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scaled {
    pub mantissa: f64,
    pub log_scale: f64,
}

impl Scaled {
    pub fn value(&self) -> f64 {
        self.mantissa * self.log_scale.exp()
    }

    /// Natural log of the represented value (mantissa must be positive).
    pub fn ln(&self) -> f64 {
        self.mantissa.ln() + self.log_scale
    }
}

/// Grid samples of an unnormalised density; represents
/// `e^{log_scale} * values`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: Arc<Grid>,
    pub(crate) values: Vec<f64>,
    pub(crate) log_scale: f64,
}

impl DensityField {
    /// Checks length, finiteness, nonnegativity and zero boundary data.
    pub fn new(grid: Arc<Grid>, values: Vec<f64>, log_scale: f64) -> Result<Self> {
        ensure!(
            values.len() == grid.node_count(),
            "field has {} values for {} nodes",
            values.len(),
            grid.node_count()
        );
        ensure!(log_scale.is_finite(), "log scale must be finite");
        ensure!(
            values.iter().all(|v| v.is_finite() && *v >= 0.0),
            "field values must be finite and nonnegative"
        );
        ensure!(
            values
                .iter()
                .zip(grid.boundary_mask())
                .all(|(v, b)| !b || *v == 0.0),
            "field must vanish on the boundary"
        );
        Ok(Self {
            grid,
            values,
            log_scale,
        })
    }

    /// Samples `p(x)` at the nodes, zeroing the boundary.
    pub fn from_fn(grid: Arc<Grid>, p: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut values = vec![0.0; grid.node_count()];
        grid.for_each_node(|idx, x| {
            if !grid.is_boundary(idx) {
                values[idx] = p(x);
            }
        });
        Self::new(grid, values, 0.0)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Multiplies the represented density by `c > 0` (via the log scale).
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.clone(),
            log_scale: self.log_scale + c.ln(),
        }
    }

    /// Represented value at node `idx`.
    pub fn represented(&self, idx: usize) -> f64 {
        self.values[idx] * self.log_scale.exp()
    }

    /// Divides the mantissa by its mass and folds the mass into the log
    /// scale. Returns the mantissa mass before rescaling.
    pub fn renormalize(&mut self) -> f64 {
        let m = trapezoid(&self.grid, &self.values, |_| 1.0);
        if m > 0.0 && m.is_finite() {
            let inv = 1.0 / m;
            self.values.iter_mut().for_each(|v| *v *= inv);
            self.log_scale += m.ln();
        }
        m
    }

    /// CSV snapshot: one `# log_scale=...` line, then `x1..xd,value`.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "# log_scale={}", self.log_scale)?;
        let d = self.grid.dim();
        let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).chain(["value".into()]).collect();
        writeln!(out, "{}", header.join(","))?;
        let mut err = Ok(());
        self.grid.for_each_node(|idx, x| {
            if err.is_ok() {
                let row: Vec<String> = x.iter().chain([&self.values[idx]]).map(f64::to_string).collect();
                err = writeln!(out, "{}", row.join(","));
            }
        });
        err?;
        Ok(())
    }
}

/// Tensor trapezoid rule of `weight(x) * values` over the grid.
pub fn trapezoid(grid: &Grid, values: &[f64], weight: impl Fn(&[f64]) -> f64) -> f64 {
    let mut x = [0.0; MAX_DIM];
    let mut acc = 0.0;
    for (idx, &v) in values.iter().enumerate() {
        if v != 0.0 {
            grid.node_point(idx, &mut x);
            acc += grid.quadrature_weight(idx) * weight(&x[..grid.dim()]) * v;
        }
    }
    acc
}

/// `∫ φ · field`, returned in mantissa / log-scale form.
pub fn integrate(field: &DensityField, weight: &TestFunction) -> Scaled {
    Scaled {
        mantissa: trapezoid(&field.grid, &field.values, |x| weight.eval(x)),
        log_scale: field.log_scale,
    }
}

pub fn mass(field: &DensityField) -> Scaled {
    Scaled {
        mantissa: trapezoid(&field.grid, &field.values, |_| 1.0),
        log_scale: field.log_scale,
    }
}

/// `σ_0 · S_R` at the nodes, `log_scale = 0`.
pub fn discretize_initial(model: &FilterModel, grid: &Arc<Grid>) -> Result<DensityField> {
    ensure!(
        model.dim() == grid.dim(),
        "model dimension {} differs from grid dimension {}",
        model.dim(),
        grid.dim()
    );
    let cutoff = mollifier(grid)?;
    let mut values = vec![0.0; grid.node_count()];
    let mut bad = None;
    grid.for_each_node(|idx, x| {
        if grid.is_boundary(idx) || cutoff[idx] == 0.0 {
            return;
        }
        let p = model.initial_density(x);
        if !(p.is_finite() && p >= 0.0) && bad.is_none() {
            bad = Some(x.to_vec());
        }
        values[idx] = p * cutoff[idx];
    });
    if let Some(point) = bad {
        return Err(Error::NonFinite {
            coefficient: "initial_density",
            point,
        });
    }
    if values.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyInitialDensity {
            radius: grid.radius(),
        });
    }
    DensityField::new(grid.clone(), values, 0.0)
}

/// `h` sampled at every node, cached for repeated exponential updates.
#[derive(Debug, Clone)]
pub struct NodeObservations {
    obs_dim: usize,
    values: Vec<f64>,
}

impl NodeObservations {
    pub fn new(model: &FilterModel, grid: &Grid) -> Result<Self> {
        let m = model.obs_dim();
        let mut values = vec![0.0; grid.node_count() * m];
        let mut bad = None;
        grid.for_each_node(|idx, x| {
            let h = &mut values[idx * m..(idx + 1) * m];
            model.observation(x, h);
            if bad.is_none() && !h.iter().all(|v| v.is_finite()) {
                bad = Some(x.to_vec());
            }
        });
        match bad {
            Some(point) => Err(Error::NonFinite {
                coefficient: "observation",
                point,
            }),
            None => Ok(Self { obs_dim: m, values }),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    #[inline]
    pub fn at(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.obs_dim..(idx + 1) * self.obs_dim]
    }

    /// `|h|^2` at node `idx`.
    pub fn norm_squared(&self, idx: usize) -> f64 {
        self.at(idx).iter().map(|v| v * v).sum()
    }

    /// Multiplies the field by `exp(hᵀ ΔY)`, shifting by the maximum
    /// exponent over the support so no mantissa can overflow.
    pub fn exp_update(&self, field: &mut DensityField, dy: &[f64]) {
        debug_assert_eq!(dy.len(), self.obs_dim);
        let exponent = |idx: usize| -> f64 { self.at(idx).iter().zip(dy).map(|(h, y)| h * y).sum() };
        let shift = field
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| exponent(i))
            .fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return;
        }
        for (i, v) in field.values.iter_mut().enumerate() {
            if *v > 0.0 {
                *v *= (exponent(i) - shift).exp();
            }
        }
        field.log_scale += shift;
    }
}

/// One-off exponential update; filters cache [`NodeObservations`] instead.
pub fn exp_update(field: &DensityField, model: &FilterModel, dy: &[f64]) -> Result<DensityField> {
    ensure!(dy.len() == model.obs_dim(), "ΔY has wrong dimension");
    ensure!(dy.iter().all(|v| v.is_finite()), "ΔY must be finite");
    let nodes = NodeObservations::new(model, field.grid())?;
    let mut out = field.clone();
    nodes.exp_update(&mut out, dy);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use crate::pde::grid::build_grid;
    use proptest::prelude::*;

    fn gauss(mu: f64, s: f64) -> impl Fn(&[f64]) -> f64 {
        move |x| (-(x[0] - mu).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn standard_normal_mass() {
        let g = build_grid(1, 6.0, 241).unwrap();
        let f = discretize_initial(&builtin_model("linear1d").unwrap(), &g).unwrap();
        assert!((mass(&f).value() - 1.0).abs() < 1e-6);
        assert_eq!(f.values()[0], 0.0);
        assert_eq!(f.values()[240], 0.0);
    }

    #[test]
    fn uniform_density_inside_plateau() {
        let m = crate::model::FilterModel::builder("u", 1)
            .initial_density(|x| if x[0].abs() <= 1.0 { 0.5 } else { 0.0 })
            .build()
            .unwrap();
        let g = build_grid(1, 6.0, 1201).unwrap();
        let f = discretize_initial(&m, &g).unwrap();
        // each jump adds half a cell of trapezoid error
        assert!((mass(&f).value() - 1.0 - g.spacing() * 0.5).abs() < 1e-9);
    }

    #[test]
    fn density_outside_domain_is_rejected() {
        let m = crate::model::FilterModel::builder("far", 1)
            .initial_density(|x| if (x[0] - 20.0).abs() < 0.5 { 1.0 } else { 0.0 })
            .build()
            .unwrap();
        let g = build_grid(1, 6.0, 61).unwrap();
        assert!(matches!(
            discretize_initial(&m, &g),
            Err(Error::EmptyInitialDensity { .. })
        ));
    }

    #[test]
    fn integrals() {
        let g = build_grid(1, 1.0, 201).unwrap();
        let ones = vec![1.0; g.node_count()];
        assert!((trapezoid(&g, &ones, |_| 1.0) - 2.0).abs() < 1e-12);

        let g = build_grid(1, 6.0, 241).unwrap();
        let f = DensityField::from_fn(g.clone(), gauss(0.0, 1.0)).unwrap();
        let m1 = integrate(&f, &TestFunction::coordinate(0)).mantissa;
        assert!(m1.abs() < 1e-12);
        let m2 = integrate(&f, &TestFunction::coordinate_squared(0)).mantissa;
        assert!((m2 - 1.0).abs() < 1e-4, "{m2}");
    }

    #[test]
    fn zero_increment_is_identity() {
        let g = build_grid(1, 6.0, 121).unwrap();
        let m = builtin_model("linear1d").unwrap();
        let f = discretize_initial(&m, &g).unwrap();
        let u = exp_update(&f, &m, &[0.0]).unwrap();
        assert_eq!(u, f);
    }

    #[test]
    fn exponential_tilt_by_h() {
        let g = build_grid(1, 6.0, 121).unwrap();
        let m = builtin_model("linear1d").unwrap();
        let f = discretize_initial(&m, &g).unwrap();
        let u = exp_update(&f, &m, &[0.1]).unwrap();
        let mut x = [0.0];
        for idx in 1..120 {
            g.node_point(idx, &mut x);
            let expect = f.represented(idx) * (0.1 * x[0]).exp();
            assert!((u.represented(idx) - expect).abs() <= 1e-13 * expect.max(1e-300));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn exp_update_is_additive(a in -0.5f64..0.5, b in -0.5f64..0.5) {
            let g = build_grid(1, 6.0, 61).unwrap();
            let m = builtin_model("linear1d").unwrap();
            let f = discretize_initial(&m, &g).unwrap();
            let two = exp_update(&exp_update(&f, &m, &[a]).unwrap(), &m, &[b]).unwrap();
            let one = exp_update(&f, &m, &[a + b]).unwrap();
            for idx in 0..g.node_count() {
                let (p, q) = (two.represented(idx), one.represented(idx));
                prop_assert!((p - q).abs() <= 1e-12 * q.abs().max(1e-300), "{p} vs {q}");
            }
        }
    }
}
