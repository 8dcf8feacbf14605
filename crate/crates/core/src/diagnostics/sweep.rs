//! Error sweeps over the time step and the domain radius.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use super::fields::tail_mass;
use crate::baselines::{bootstrap_pf, kalman_filter};
use crate::error::{ensure, Error, Result};
use crate::filter::{run_filter, FilterOptions, Stage, YauYauFilter};
use crate::model::{FilterModel, TestFunction, TimeSchedule};
use crate::pde::{build_grid, Grid};
use crate::sde::simulate_path;
use crate::stats::{mean_stderr, ols, LineFit};

/// Accepted band for the log-log slope of error against δ.
pub const SLOPE_BAND: (f64, f64) = (0.35, 0.65);
/// Required error reduction between the largest and the smallest δ.
pub const HALVING_FACTOR: f64 = 0.5;
/// Slack on the fitted tail bound.
pub const TAIL_BOUND_FACTOR: f64 = 1.5;
/// Tolerance of the aggregation-order self-check.
pub const AGGREGATION_TOLERANCE: f64 = 1e-12;

/// Seed offset for oracle particle clouds, keeping their streams disjoint
/// from the path that generated the observations.
const ORACLE_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean_err: f64,
    pub stderr: f64,
    pub n: usize,
}

/// One measurement in plot-ready long format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongRow {
    pub value: f64,
    pub seed: Option<u64>,
    pub metric: String,
    pub measurement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    /// `delta`, `R` or `M`.
    pub axis: String,
    pub rows: Vec<SweepRow>,
    /// Log-log fit of `mean_err` against the axis value (three or more
    /// positive rows).
    pub fit: Option<LineFit>,
    pub flags: BTreeMap<String, bool>,
    pub long: Vec<LongRow>,
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    axis: &'a str,
    values: Vec<f64>,
    slope: Option<f64>,
    slope_ci: Option<f64>,
    pass: &'a BTreeMap<String, bool>,
    all_pass: bool,
}

impl SweepResult {
    pub fn passed(&self) -> bool {
        self.flags.values().all(|v| *v)
    }

    /// `axis,value,mean_err,stderr,n`.
    pub fn write_csv<W: Write>(&self, out: W, comment: Option<&str>) -> Result<()> {
        let mut w = csv_writer(out, comment)?;
        w.write_record(["axis", "value", "mean_err", "stderr", "n"])?;
        for r in &self.rows {
            w.write_record([
                self.axis.clone(),
                r.value.to_string(),
                r.mean_err.to_string(),
                r.stderr.to_string(),
                r.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `axis,value,seed,metric,measurement`; aggregate rows leave `seed`
    /// empty.
    pub fn write_long_csv<W: Write>(&self, out: W, comment: Option<&str>) -> Result<()> {
        let mut w = csv_writer(out, comment)?;
        w.write_record(["axis", "value", "seed", "metric", "measurement"])?;
        for r in &self.long {
            w.write_record([
                self.axis.clone(),
                r.value.to_string(),
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
                r.metric.clone(),
                r.measurement.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Single-line JSON with the slope and the pass flags.
    pub fn summary_json(&self) -> String {
        let s = Summary {
            axis: &self.axis,
            values: self.rows.iter().map(|r| r.value).collect(),
            slope: self.fit.map(|f| f.slope),
            slope_ci: self.fit.map(|f| f.slope_ci),
            pass: &self.flags,
            all_pass: self.passed(),
        };
        serde_json::to_string(&s).expect("summary serialises")
    }
}

fn csv_writer<W: Write>(mut out: W, comment: Option<&str>) -> Result<csv::Writer<W>> {
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out))
}

/// Reference used by [`convergence_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Oracle {
    /// Kalman filter on the finest observation grid (linear models only).
    Kalman,
    /// The grid filter itself on a refined grid (`space_factor`) at the
    /// finest observation grid.
    FineFilter { space_factor: usize },
    /// Bootstrap particle filter on the finest observation grid.
    ParticleFilter { particles: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepOptions {
    pub filter: FilterOptions,
    /// Euler–Maruyama steps per interval of the simulation schedule.
    pub sim_substeps: usize,
    /// The oracle and the simulated path run on `δ_min / oracle_refine`.
    pub oracle_refine: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            filter: FilterOptions::default(),
            sim_substeps: 4,
            oracle_refine: 8,
        }
    }
}

fn steps_for(terminal: f64, delta: f64) -> Result<usize> {
    let k = terminal / delta;
    let r = k.round();
    ensure!(
        r >= 1.0 && (k - r).abs() <= 1e-9 * r,
        "δ = {delta} does not divide T = {terminal}"
    );
    Ok(r as usize)
}

fn is_geometric(values: &[f64]) -> bool {
    values.windows(3).all(|w| {
        let (a, b) = (w[0] / w[1], w[1] / w[2]);
        (a - b).abs() <= 1e-9 * a
    })
}

/// Mean over `values` (same length for every seed) in both aggregation
/// orders; fails if they disagree beyond rounding.
fn aggregate(per_seed: &[Vec<f64>]) -> Result<(f64, f64, Vec<f64>)> {
    let seed_means: Vec<f64> = per_seed
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let (mean, se) = mean_stderr(&seed_means);
    let flat: Vec<f64> = per_seed.iter().flatten().copied().collect();
    let pooled = flat.iter().sum::<f64>() / flat.len() as f64;
    if (mean - pooled).abs() > AGGREGATION_TOLERANCE * mean.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "aggregation orders disagree: {mean} vs {pooled}"
        )));
    }
    Ok((mean, se, seed_means))
}

fn monotone_within_stderr(rows: &[SweepRow]) -> bool {
    rows.windows(2)
        .all(|w| w[1].mean_err <= w[0].mean_err + w[0].stderr.max(w[1].stderr))
}

/// Expectation-level error of the filter against `oracle` for every δ.
///
/// Per seed, one path is simulated at `δ_min / oracle_refine`, the oracle
/// runs on it, and the observations are subsampled to each δ. The error of
/// a run is the mean over knots `1..=K` of `|estimate − oracle|`.
#[allow(clippy::too_many_arguments)]
pub fn convergence_sweep(
    model: &FilterModel,
    grid: &Arc<Grid>,
    terminal: f64,
    deltas: &[f64],
    seeds: &[u64],
    oracle: Oracle,
    phi: &TestFunction,
    options: &SweepOptions,
) -> Result<SweepResult> {
    ensure!(!deltas.is_empty(), "no δ values given");
    ensure!(!seeds.is_empty(), "no seeds given");
    ensure!(options.oracle_refine >= 1, "oracle refinement must be >= 1");
    let mut deltas = deltas.to_vec();
    deltas.sort_by(|a, b| b.total_cmp(a));
    ensure!(is_geometric(&deltas), "δ values must form a geometric progression");
    let steps: Vec<usize> = deltas.iter().map(|d| steps_for(terminal, *d)).collect::<Result<_>>()?;
    let finest = *steps.last().unwrap();
    for (k, d) in steps.iter().zip(&deltas) {
        ensure!(finest % k == 0, "δ = {d} does not nest in the smallest δ");
    }
    if oracle == Oracle::Kalman && model.linear().is_none() {
        return Err(Error::NotLinear(model.name().to_string()));
    }
    let fine = TimeSchedule::new(terminal, finest * options.oracle_refine)?;
    let filters: Vec<YauYauFilter> = deltas
        .iter()
        .map(|d| YauYauFilter::new(model, grid, *d, options.filter))
        .collect::<Result<_>>()?;
    let tests = std::slice::from_ref(phi);

    // errors[seed][δ] = per-knot absolute errors
    let errors: Vec<Vec<Vec<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let (_, path) = simulate_path(model, &fine, options.sim_substeps, seed, 0)?;
            let reference: Vec<f64> = match oracle {
                Oracle::Kalman => kalman_filter(model, &fine, &path)?.expectations(phi),
                Oracle::FineFilter { space_factor } => {
                    let g = Arc::new(grid.refine(space_factor)?);
                    column(run_filter(model, &g, &fine, &path, tests, options.filter.substeps)?.estimates)
                }
                Oracle::ParticleFilter { particles } => column(
                    bootstrap_pf(model, &fine, &path, tests, particles, seed ^ ORACLE_SEED_MIX)?.estimates,
                ),
            };
            filters
                .iter()
                .zip(&steps)
                .map(|(filter, &k)| {
                    let factor = fine.steps() / k;
                    let est = column(filter.run(&path.subsample(factor)?, tests)?.estimates);
                    Ok((1..=k).map(|j| (est[j] - reference[j * factor]).abs()).collect())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut long = Vec::new();
    for (i, &delta) in deltas.iter().enumerate() {
        let per_seed: Vec<Vec<f64>> = errors.iter().map(|e| e[i].clone()).collect();
        let (mean_err, stderr, seed_means) = aggregate(&per_seed)?;
        for (seed, e) in seeds.iter().zip(&seed_means) {
            long.push(LongRow {
                value: delta,
                seed: Some(*seed),
                metric: "abs_err".into(),
                measurement: *e,
            });
        }
        rows.push(SweepRow {
            value: delta,
            mean_err,
            stderr,
            n: seeds.len(),
        });
    }

    let fit = if rows.len() >= 3 && rows.iter().all(|r| r.mean_err > 0.0) {
        let x: Vec<f64> = rows.iter().map(|r| r.value.ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.mean_err.ln()).collect();
        ols(&x, &y)
    } else {
        None
    };
    let mut flags = BTreeMap::new();
    flags.insert("slope_defined".to_string(), fit.is_some());
    if let Some(f) = fit {
        flags.insert(
            "slope_in_band".to_string(),
            (SLOPE_BAND.0..=SLOPE_BAND.1).contains(&f.slope),
        );
    }
    if rows.len() >= 2 {
        let (first, last) = (rows[0].mean_err, rows[rows.len() - 1].mean_err);
        flags.insert("error_halved".to_string(), last <= HALVING_FACTOR * first);
        flags.insert("monotone".to_string(), monotone_within_stderr(&rows));
    }
    Ok(SweepResult {
        axis: "delta".into(),
        rows,
        fit,
        flags,
        long,
    })
}

fn column(estimates: Vec<Vec<f64>>) -> Vec<f64> {
    estimates.into_iter().map(|r| r[0]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusSweep {
    /// `mean |estimate(R) − estimate(R_max)|` per radius.
    pub error: SweepResult,
    /// `sup_k E tail_mass(σ_k^{R_max}, R)` per radius.
    pub tail: Vec<f64>,
    /// `C` in `C / (1 + R^{2n})`, fitted at the smallest radius.
    pub bound_constant: f64,
    pub bound: Vec<f64>,
}

/// Runs the filter at every radius with a common spacing (`M` scales with
/// `R`) on shared observation paths. The run at the largest radius is the
/// reference, and its densities provide the tail curve.
#[allow(clippy::too_many_arguments)]
pub fn radius_sweep(
    model: &FilterModel,
    schedule: &TimeSchedule,
    radii: &[f64],
    spacing: f64,
    seeds: &[u64],
    phi: &TestFunction,
    tail_order: u32,
    options: &SweepOptions,
) -> Result<RadiusSweep> {
    ensure!(radii.len() >= 3, "at least three radii required");
    ensure!(!seeds.is_empty(), "no seeds given");
    ensure!(spacing > 0.0, "spacing must be positive");
    let mut radii = radii.to_vec();
    radii.sort_by(|a, b| a.total_cmp(b));
    let grids: Vec<Arc<Grid>> = radii
        .iter()
        .map(|&r| {
            let cells = 2.0 * r / spacing;
            let c = cells.round();
            ensure!(
                (cells - c).abs() <= 1e-9 * c && (c as usize) % 2 == 0,
                "R = {r} is not an even number of cells of width {spacing}"
            );
            build_grid(model.dim(), r, c as usize + 1)
        })
        .collect::<Result<_>>()?;
    let filters: Vec<YauYauFilter> = grids
        .iter()
        .map(|g| YauYauFilter::new(model, g, schedule.delta(), options.filter))
        .collect::<Result<_>>()?;
    let tests = std::slice::from_ref(phi);
    let last = radii.len() - 1;

    // per seed: (estimates per radius, tails[k][radius])
    type SeedRun = (Vec<Vec<f64>>, Vec<Vec<f64>>);
    let runs: Vec<SeedRun> = seeds
        .par_iter()
        .map(|&seed| {
            let (_, obs) = simulate_path(model, schedule, options.sim_substeps, seed, 0)?;
            let mut estimates = Vec::with_capacity(radii.len());
            for f in &filters[..last] {
                estimates.push(column(f.run(&obs, tests)?.estimates));
            }
            let mut tails = vec![vec![0.0; radii.len()]; schedule.steps() + 1];
            let mut failure: Option<Error> = None;
            let reference = filters[last].run_with(&obs, tests, |k, stage, field| {
                if stage == Stage::Updated {
                    for (i, &r) in radii.iter().enumerate() {
                        match tail_mass(field, r) {
                            Ok(t) => tails[k][i] = t,
                            Err(e) => failure = Some(e),
                        }
                    }
                }
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            estimates.push(column(reference.estimates));
            Ok((estimates, tails))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut long = Vec::new();
    for (i, &r) in radii.iter().enumerate() {
        let per_seed: Vec<Vec<f64>> = runs
            .iter()
            .map(|(est, _)| {
                (1..=schedule.steps())
                    .map(|k| (est[i][k] - est[last][k]).abs())
                    .collect()
            })
            .collect();
        let (mean_err, stderr, seed_means) = aggregate(&per_seed)?;
        for ((seed, e), (_, tails)) in seeds.iter().zip(&seed_means).zip(&runs) {
            long.push(LongRow {
                value: r,
                seed: Some(*seed),
                metric: "abs_err".into(),
                measurement: *e,
            });
            long.push(LongRow {
                value: r,
                seed: Some(*seed),
                metric: "tail_mass_sup".into(),
                measurement: tails.iter().map(|t| t[i]).fold(0.0, f64::max),
            });
        }
        rows.push(SweepRow {
            value: r,
            mean_err,
            stderr,
            n: seeds.len(),
        });
    }
    let tail: Vec<f64> = (0..radii.len())
        .map(|i| {
            (0..=schedule.steps())
                .map(|k| runs.iter().map(|(_, t)| t[k][i]).sum::<f64>() / runs.len() as f64)
                .fold(0.0, f64::max)
        })
        .collect();
    let power = |r: f64| 1.0 + r.powi(2 * tail_order as i32);
    let bound_constant = tail[0] * power(radii[0]);
    let bound: Vec<f64> = radii.iter().map(|&r| bound_constant / power(r)).collect();
    for (i, &r) in radii.iter().enumerate() {
        long.push(LongRow {
            value: r,
            seed: None,
            metric: "tail_mass".into(),
            measurement: tail[i],
        });
        long.push(LongRow {
            value: r,
            seed: None,
            metric: "tail_bound".into(),
            measurement: bound[i],
        });
    }

    let mut flags = BTreeMap::new();
    flags.insert("error_monotone".to_string(), monotone_within_stderr(&rows));
    flags.insert("tail_monotone".to_string(), tail.windows(2).all(|w| w[1] <= w[0]));
    flags.insert(
        "tail_bound".to_string(),
        (1..radii.len()).all(|i| tail[i] <= TAIL_BOUND_FACTOR * bound[i]),
    );
    Ok(RadiusSweep {
        error: SweepResult {
            axis: "R".into(),
            rows,
            fit: None,
            flags,
            long,
        },
        tail,
        bound_constant,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_model;

    #[test]
    fn single_delta_has_no_slope() {
        let m = builtin_model("linear1d").unwrap();
        let g = build_grid(1, 5.0, 101).unwrap();
        let r = convergence_sweep(
            &m,
            &g,
            0.2,
            &[0.02],
            &[1, 2],
            Oracle::Kalman,
            &TestFunction::coordinate(0),
            &SweepOptions::default(),
        )
        .unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.fit.is_none());
        assert_eq!(r.flags["slope_defined"], false);
        assert!(!r.passed());
    }

    #[test]
    fn sweep_is_reproducible_and_serialises() {
        let m = builtin_model("linear1d").unwrap();
        let g = build_grid(1, 5.0, 101).unwrap();
        let run = || {
            convergence_sweep(
                &m,
                &g,
                0.4,
                &[0.02, 0.04, 0.08],
                &[3, 4, 5],
                Oracle::Kalman,
                &TestFunction::coordinate(0),
                &SweepOptions::default(),
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.rows[0].value, 0.08);
        assert!(a.fit.is_some());
        let mut csv = Vec::new();
        a.write_csv(&mut csv, Some("test")).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("# test\naxis,value,mean_err,stderr,n\ndelta,0.08,"));
        assert_eq!(text.lines().count(), 5);
        let json: serde_json::Value = serde_json::from_str(&a.summary_json()).unwrap();
        assert!(json["slope"].is_f64());
        assert!(json["pass"]["slope_in_band"].is_boolean());
        let mut long = Vec::new();
        a.write_long_csv(&mut long, None).unwrap();
        assert_eq!(String::from_utf8(long).unwrap().lines().count(), 1 + 9);
    }

    #[test]
    fn sweep_rejects_bad_axes() {
        let m = builtin_model("linear1d").unwrap();
        let g = build_grid(1, 5.0, 101).unwrap();
        let phi = TestFunction::coordinate(0);
        let o = SweepOptions::default();
        let seeds = [1];
        assert!(convergence_sweep(&m, &g, 1.0, &[0.1, 0.05, 0.02], &seeds, Oracle::Kalman, &phi, &o).is_err());
        assert!(convergence_sweep(&m, &g, 1.0, &[0.3], &seeds, Oracle::Kalman, &phi, &o).is_err());
        let b = builtin_model("benes").unwrap();
        assert!(matches!(
            convergence_sweep(&b, &g, 1.0, &[0.1], &seeds, Oracle::Kalman, &phi, &o),
            Err(Error::NotLinear(_))
        ));
    }

    #[test]
    fn radius_self_reference_row_is_zero() {
        let m = builtin_model("linear1d").unwrap();
        let s = TimeSchedule::new(0.2, 10).unwrap();
        let r = radius_sweep(
            &m,
            &s,
            &[3.0, 4.0, 5.0],
            0.1,
            &[1, 2, 3],
            &TestFunction::coordinate(0),
            2,
            &SweepOptions::default(),
        )
        .unwrap();
        let last = r.error.rows.last().unwrap();
        assert_eq!((last.mean_err, last.stderr), (0.0, 0.0));
        assert_eq!(*r.tail.last().unwrap(), 0.0);
        assert!(r.tail[0] > r.tail[1]);
        assert!(r.error.flags["tail_monotone"]);
        assert!(radius_sweep(&m, &s, &[3.0, 4.05, 5.0], 0.1, &[1], &TestFunction::coordinate(0), 2, &SweepOptions::default()).is_err());
    }

    #[test]
    fn aggregation_orders_agree() {
        let per_seed = vec![vec![0.1, 0.2, 0.3], vec![1e-3, 5.0, 0.7]];
        let (m, _, means) = aggregate(&per_seed).unwrap();
        assert!((m - (0.2 + 5.701 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(means.len(), 2);
    }
}
