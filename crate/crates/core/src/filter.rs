//! Online stage: for each observation interval, propagate the density by
//! the precomputed semigroup, multiply by `exp(hᵀ ΔY)`, then read out
//! normalised expectations.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{ensure, Error, Result};
use crate::model::{FilterModel, TestFunction, TimeSchedule};
use crate::pde::{
    assemble_generator, discretize_initial, integrate, mass, DensityField, Grid,
    NodeObservations, PropagationStats, Propagator,
};
use crate::sde::ObservationPath;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterOptions {
    /// Crank–Nicolson steps per observation interval.
    pub substeps: usize,
    /// Fold the field mass into the log scale after every update.
    pub renormalize: bool,
    /// Largest tolerated clamped-negative mass relative to field mass.
    pub clamp_tolerance: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            substeps: 4,
            renormalize: true,
            clamp_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KnotDiagnostics {
    /// Mantissa mass after the update, before renormalisation; the
    /// represented mass is `mass_mantissa * e^{log_scale}`.
    pub mass_mantissa: f64,
    pub log_scale: f64,
    pub clamped_mass: f64,
    pub min_value: f64,
}

/// Estimates at `τ_0..τ_K`, one column per test function. Row 0 is the
/// prior; row `k >= 1` is read from the density after the `k`-th update.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub schedule: TimeSchedule,
    pub labels: Vec<String>,
    pub estimates: Vec<Vec<f64>>,
    pub diagnostics: Vec<KnotDiagnostics>,
}

impl FilterOutput {
    pub fn column(&self, label: &str) -> Option<Vec<f64>> {
        let j = self.labels.iter().position(|l| l == label)?;
        Some(self.estimates.iter().map(|row| row[j]).collect())
    }

    /// Keeps every `factor`-th knot.
    pub fn subsample(&self, factor: usize) -> Result<Self> {
        let schedule = self.schedule.coarsen(factor)?;
        let pick = |k: usize| k * factor;
        Ok(Self {
            schedule,
            labels: self.labels.clone(),
            estimates: (0..=schedule.steps()).map(|k| self.estimates[pick(k)].clone()).collect(),
            diagnostics: (0..=schedule.steps()).map(|k| self.diagnostics[pick(k)]).collect(),
        })
    }

    /// Columns `t, <labels>, mass_log_scale, clamped_mass`.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend(self.labels.iter().cloned());
        header.extend(["mass_log_scale".into(), "clamped_mass".into()]);
        w.write_record(&header)?;
        for (k, (row, diag)) in self.estimates.iter().zip(&self.diagnostics).enumerate() {
            let mut rec = vec![self.schedule.knot(k).to_string()];
            rec.extend(row.iter().map(f64::to_string));
            rec.push((diag.mass_mantissa.ln() + diag.log_scale).to_string());
            rec.push(diag.clamped_mass.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which field an observer is shown during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// `ũ_k(τ_k)`: after propagation, before the exponential update.
    Propagated,
    /// `ũ_{k+1}(τ_k)`: after the update (and renormalisation).
    Updated,
}

/// `∫ φ u / ∫ u`; the shared log scale cancels.
pub fn estimate(field: &DensityField, phi: &TestFunction) -> Result<f64> {
    let m = mass(field).mantissa;
    if !(m > 0.0) {
        return Err(Error::ZeroMass);
    }
    Ok(integrate(field, phi).mantissa / m)
}

/// The offline artefacts for one `(model, grid, δ)`: generator, CN
/// propagator, cached `h` at the nodes and the initial field. Reusable
/// across any number of observation paths.
pub struct YauYauFilter {
    model: FilterModel,
    grid: Arc<Grid>,
    delta: f64,
    options: FilterOptions,
    propagator: Propagator,
    observations: NodeObservations,
    initial: DensityField,
}

impl YauYauFilter {
    pub fn new(
        model: &FilterModel,
        grid: &Arc<Grid>,
        delta: f64,
        options: FilterOptions,
    ) -> Result<Self> {
        let initial = discretize_initial(model, grid)?;
        Self::with_initial(model, initial, delta, options)
    }

    /// Uses a caller-supplied initial field instead of `σ_0 · S_R`.
    pub fn with_initial(
        model: &FilterModel,
        initial: DensityField,
        delta: f64,
        options: FilterOptions,
    ) -> Result<Self> {
        let grid = initial.grid().clone();
        let generator = assemble_generator(model, &grid)?;
        let needed = generator.positivity_substeps(delta);
        if options.substeps < needed {
            log::warn!(
                "{}: {} substeps per step; the explicit half of Crank–Nicolson stays nonnegative only from {needed}",
                model.name(),
                options.substeps
            );
        }
        let propagator = Propagator::new(&generator, delta, options.substeps)?;
        let observations = NodeObservations::new(model, &grid)?;
        Ok(Self {
            model: model.clone(),
            grid,
            delta,
            options,
            propagator,
            observations,
            initial,
        })
    }

    pub fn model(&self) -> &FilterModel {
        &self.model
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn initial_field(&self) -> &DensityField {
        &self.initial
    }

    pub fn run(&self, obs: &ObservationPath, tests: &[TestFunction]) -> Result<FilterOutput> {
        self.run_with(obs, tests, |_, _, _| {})
    }

    /// Runs the online loop, showing `observer` the field at every stage.
    pub fn run_with(
        &self,
        obs: &ObservationPath,
        tests: &[TestFunction],
        mut observer: impl FnMut(usize, Stage, &DensityField),
    ) -> Result<FilterOutput> {
        let schedule = *obs.schedule();
        ensure!(
            (schedule.delta() - self.delta).abs() <= 1e-12 * self.delta,
            "observation spacing {} differs from filter step {}",
            schedule.delta(),
            self.delta
        );
        ensure!(
            obs.dim() == self.model.obs_dim(),
            "observation dimension {} differs from model {}",
            obs.dim(),
            self.model.obs_dim()
        );
        let mut field = self.initial.clone();
        let m0 = mass(&field).mantissa;
        let scale0 = field.log_scale();
        if self.options.renormalize {
            field.renormalize();
        }
        let readout = |field: &DensityField| -> Result<Vec<f64>> {
            tests.iter().map(|phi| estimate(field, phi)).collect()
        };
        let mut estimates = vec![readout(&field)?];
        let mut diagnostics = vec![KnotDiagnostics {
            mass_mantissa: m0,
            log_scale: scale0,
            clamped_mass: 0.0,
            min_value: field.min_value(),
        }];
        observer(0, Stage::Updated, &field);

        let mut dy = vec![0.0; obs.dim()];
        for k in 1..=schedule.steps() {
            let PropagationStats {
                clamped_mass,
                min_value,
                ..
            } = self.propagator.advance(&mut field)?;
            let propagated_mass = mass(&field).mantissa;
            if !(propagated_mass >= 1e-300) {
                return Err(Error::MassCollapse {
                    knot: k,
                    mass: propagated_mass,
                });
            }
            let ratio = clamped_mass / propagated_mass;
            if ratio > self.options.clamp_tolerance {
                return Err(Error::ClampTolerance {
                    knot: k,
                    ratio,
                    tolerance: self.options.clamp_tolerance,
                });
            }
            observer(k, Stage::Propagated, &field);

            obs.increment_into(k, &mut dy);
            self.observations.exp_update(&mut field, &dy);
            let m = mass(&field).mantissa;
            if !(m >= 1e-300) {
                return Err(Error::MassCollapse { knot: k, mass: m });
            }
            let scale = field.log_scale();
            if self.options.renormalize {
                field.renormalize();
            }
            estimates.push(readout(&field)?);
            diagnostics.push(KnotDiagnostics {
                mass_mantissa: m,
                log_scale: scale,
                clamped_mass,
                min_value,
            });
            observer(k, Stage::Updated, &field);
        }
        Ok(FilterOutput {
            schedule,
            labels: tests.iter().map(|t| t.label().to_string()).collect(),
            estimates,
            diagnostics,
        })
    }
}

/// Builds the offline stage and runs it once on `obs`.
pub fn run_filter(
    model: &FilterModel,
    grid: &Arc<Grid>,
    schedule: &TimeSchedule,
    obs: &ObservationPath,
    tests: &[TestFunction],
    substeps: usize,
) -> Result<FilterOutput> {
    ensure!(
        obs.schedule() == schedule,
        "observation path is not on the requested schedule"
    );
    let options = FilterOptions {
        substeps,
        ..FilterOptions::default()
    };
    YauYauFilter::new(model, grid, schedule.delta(), options)?.run(obs, tests)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;
    use crate::pde::build_grid;
    use crate::sde::simulate;

    fn gaussian(mu: f64, s: f64) -> impl Fn(&[f64]) -> f64 {
        move |x| (-(x[0] - mu).powi(2) / (2.0 * s * s)).exp()
    }

    #[test]
    fn estimate_of_one_is_one() {
        let g = build_grid(1, 6.0, 121).unwrap();
        let f = DensityField::from_fn(g, gaussian(0.4, 0.7)).unwrap();
        assert!((estimate(&f, &TestFunction::one()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_field_has_zero_mean() {
        let g = build_grid(1, 6.0, 121).unwrap();
        let f = DensityField::from_fn(g, gaussian(0.0, 1.3)).unwrap();
        assert!(estimate(&f, &TestFunction::coordinate(0)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn narrow_gaussian_second_moment() {
        let g = build_grid(1, 3.0, 6001).unwrap();
        let f = DensityField::from_fn(g, gaussian(1.5, 0.05)).unwrap();
        let v = estimate(&f, &TestFunction::coordinate_squared(0)).unwrap();
        assert!((v - 2.2525).abs() < 1e-3, "{v}");
    }

    #[test]
    fn zero_mass_is_an_error() {
        let g = build_grid(1, 2.0, 11).unwrap();
        let f = DensityField::new(g, vec![0.0; 11], 0.0).unwrap();
        assert!(matches!(estimate(&f, &TestFunction::one()), Err(Error::ZeroMass)));
    }

    #[test]
    fn output_has_one_row_per_knot_and_unit_normalisation() {
        let m = builtin_model("linear1d").unwrap();
        let g = build_grid(1, 6.0, 121).unwrap();
        let s = TimeSchedule::new(0.5, 25).unwrap();
        let (_, y) = simulate(&m, &s, 4, 3).unwrap();
        let out = run_filter(&m, &g, &s, &y, &[TestFunction::one(), TestFunction::coordinate(0)], 4)
            .unwrap();
        assert_eq!(out.estimates.len(), 26);
        for row in &out.estimates {
            assert!((row[0] - 1.0).abs() < 1e-12);
            assert!(row[1].is_finite());
        }
        let mut buf = Vec::new();
        out.write_csv(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,one,x1,mass_log_scale,clamped_mass\n"));
        assert_eq!(text.lines().count(), 27);
    }

    #[test]
    fn uninformative_observations_keep_symmetric_mean_at_zero() {
        let m = builtin_model("linear1d").unwrap().unobserved();
        let g = build_grid(1, 6.0, 121).unwrap();
        let s = TimeSchedule::new(1.0, 20).unwrap();
        let (_, y) = simulate(&m, &s, 2, 8).unwrap();
        let out = run_filter(&m, &g, &s, &y, &[TestFunction::coordinate(0)], 4).unwrap();
        for row in &out.estimates {
            assert!(row[0].abs() < 1e-10);
        }
    }

    #[test]
    fn scaling_the_prior_changes_nothing() {
        let m = builtin_model("benes").unwrap();
        let g = build_grid(1, 6.0, 121).unwrap();
        let s = TimeSchedule::new(0.5, 20).unwrap();
        let (_, y) = simulate(&m, &s, 2, 4).unwrap();
        let tests = [TestFunction::coordinate(0), TestFunction::coordinate_squared(0)];
        let base = YauYauFilter::new(&m, &g, s.delta(), FilterOptions::default()).unwrap();
        let a = base.run(&y, &tests).unwrap();
        for c in [1e-8, 3.7, 1e12] {
            let prior = m.clone();
            let scaled = m
                .rebuild()
                .initial_density(move |x| c * prior.initial_density(x))
                .build()
                .unwrap();
            let out = run_filter(&scaled, &g, &s, &y, &tests, 4).unwrap();
            for (r1, r2) in a.estimates.iter().zip(&out.estimates) {
                for (u, v) in r1.iter().zip(r2) {
                    assert!((u - v).abs() < 1e-12, "c={c}: {u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn renormalisation_is_neutral() {
        let m = builtin_model("cubic_sensor").unwrap();
        let g = build_grid(1, 4.0, 81).unwrap();
        let s = TimeSchedule::new(0.2, 20).unwrap();
        let (_, y) = simulate(&m, &s, 2, 6).unwrap();
        let tests = [TestFunction::coordinate(0)];
        let opts = FilterOptions {
            substeps: 16,
            ..FilterOptions::default()
        };
        let on = YauYauFilter::new(&m, &g, s.delta(), opts).unwrap();
        let off = YauYauFilter::new(
            &m,
            &g,
            s.delta(),
            FilterOptions {
                renormalize: false,
                ..opts
            },
        )
        .unwrap();
        let (a, b) = (on.run(&y, &tests).unwrap(), off.run(&y, &tests).unwrap());
        for (r1, r2) in a.estimates.iter().zip(&b.estimates) {
            assert!((r1[0] - r2[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn mismatched_schedule_is_rejected() {
        let m = builtin_model("linear1d").unwrap();
        let g = build_grid(1, 6.0, 61).unwrap();
        let s = TimeSchedule::new(1.0, 10).unwrap();
        let (_, y) = simulate(&m, &s, 1, 0).unwrap();
        let f = YauYauFilter::new(&m, &g, 0.05, FilterOptions::default()).unwrap();
        assert!(f.run(&y, &[]).is_err());
    }
}
