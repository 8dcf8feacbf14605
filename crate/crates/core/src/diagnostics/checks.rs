//! Run-level stability checks: moment growth, L⁴ non-explosion, the
//! one-step exponential-moment amplification and the deterministic L⁴
//! growth of the propagation semigroup.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, Result};
use crate::filter::{FilterOptions, Stage, YauYauFilter};
use crate::model::{FilterModel, TimeSchedule};
use crate::pde::{assemble_transport, mass, trapezoid, DensityField, Grid, NodeObservations, Propagator};
use crate::rng;
use crate::sde::{simulate_path, simulate_reference_observations, ObservationPath};
use crate::stats::{log_mean_exp, log_sum_exp, mean_stderr, wls_known, LineFit};

/// Relative tolerance for the δ-stability checks.
pub const STABILITY_TOLERANCE: f64 = 0.2;
/// Absolute slack on growth exponents, which are pure noise when the true
/// exponent is near zero.
pub const EXPONENT_FLOOR: f64 = 0.05;

/// Which law the observation paths of a check are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationLaw {
    /// `Y` is a standard Brownian motion independent of the state.
    Reference,
    /// `Y` is generated by the model from a simulated state path.
    Signal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckOptions {
    pub filter: FilterOptions,
    /// Euler–Maruyama steps per interval of the finest schedule.
    pub sim_substeps: usize,
    pub law: ObservationLaw,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            filter: FilterOptions::default(),
            sim_substeps: 4,
            law: ObservationLaw::Reference,
        }
    }
}

/// One observation path per seed on `schedule`.
pub fn observation_paths(
    model: &FilterModel,
    schedule: &TimeSchedule,
    law: ObservationLaw,
    sim_substeps: usize,
    seeds: &[u64],
) -> Result<Vec<ObservationPath>> {
    seeds
        .par_iter()
        .map(|&seed| match law {
            ObservationLaw::Reference => {
                simulate_reference_observations(model.obs_dim(), schedule, sim_substeps, seed, 0)
            }
            ObservationLaw::Signal => simulate_path(model, schedule, sim_substeps, seed, 0).map(|p| p.1),
        })
        .collect()
}

/// `ln Σ wᵢ (e^{ls} vᵢ)^p e^{-p hᵢᵀ y}` over the positive nodes.
fn log_lp(field: &DensityField, p: f64, tilt: Option<(&NodeObservations, &[f64])>) -> f64 {
    let grid = field.grid();
    let ls = field.log_scale();
    let terms: Vec<f64> = field
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, v)| {
            let shift = tilt.map_or(0.0, |(h, y)| h.at(i).iter().zip(y).map(|(a, b)| a * b).sum());
            grid.quadrature_weight(i).ln() + p * (v.ln() + ls - shift)
        })
        .collect();
    log_sum_exp(&terms)
}

fn check_seeds(seeds: &[u64], min: usize) -> Result<()> {
    ensure!(seeds.len() >= min, "at least {min} seeds required, got {}", seeds.len());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentGrowthReport {
    pub order: u32,
    pub seeds: usize,
    pub deltas: Vec<f64>,
    /// Per δ: seed-averaged `∫(1+|x|^order) σ_k` over its initial value.
    pub ratios: Vec<Vec<f64>>,
    pub max_ratio: Vec<f64>,
    /// `ln(max ratio) / T` per δ.
    pub exponent: Vec<f64>,
    pub pass: bool,
}

/// Averages the unnormalised moment `∫(1+|x|^order)·σ_k` over seeds at
/// each knot, for `schedule` and its δ-halving, and compares the implied
/// growth exponents.
pub fn moment_growth_check(
    model: &FilterModel,
    grid: &Arc<Grid>,
    schedule: &TimeSchedule,
    seeds: &[u64],
    order: u32,
    options: &CheckOptions,
) -> Result<MomentGrowthReport> {
    check_seeds(seeds, 10)?;
    ensure!(order >= 2 && order % 2 == 0, "moment order must be even and >= 2, got {order}");
    let fine = schedule.refine(2)?;
    let paths = observation_paths(model, &fine, options.law, options.sim_substeps, seeds)?;
    let n = (order / 2) as i32;
    let weight = |x: &[f64]| 1.0 + x.iter().map(|v| v * v).sum::<f64>().powi(n);

    let mut ratios = Vec::new();
    let mut deltas = Vec::new();
    for (s, factor) in [(*schedule, 2), (fine, 1)] {
        let filter = YauYauFilter::new(model, grid, s.delta(), options.filter)?;
        let per_seed: Vec<Vec<f64>> = paths
            .par_iter()
            .map(|p| {
                let obs = p.subsample(factor)?;
                let mut logs = vec![0.0; s.steps() + 1];
                filter.run_with(&obs, &[], |k, stage, field| {
                    if stage == Stage::Updated {
                        let m = trapezoid(grid, field.values(), weight);
                        logs[k] = m.ln() + field.log_scale();
                    }
                })?;
                Ok(logs)
            })
            .collect::<Result<_>>()?;
        let mean: Vec<f64> = (0..=s.steps())
            .map(|k| log_mean_exp(&per_seed.iter().map(|l| l[k]).collect::<Vec<_>>()))
            .collect();
        ratios.push(mean.iter().map(|m| (m - mean[0]).exp()).collect::<Vec<f64>>());
        deltas.push(s.delta());
    }
    let max_ratio: Vec<f64> = ratios.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let exponent: Vec<f64> = max_ratio.iter().map(|r| r.ln() / schedule.terminal()).collect();
    let pass = max_ratio.iter().all(|r| r.is_finite())
        && (exponent[0] - exponent[1]).abs()
            <= STABILITY_TOLERANCE * exponent[0].abs().max(exponent[1].abs()) + EXPONENT_FLOOR;
    Ok(MomentGrowthReport {
        order,
        seeds: seeds.len(),
        deltas,
        ratios,
        max_ratio,
        exponent,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct L4Report {
    pub seeds: usize,
    pub deltas: Vec<f64>,
    /// `sup_k E‖u_k(τ_k)‖²_{L²}` per δ.
    pub sup_l2: Vec<f64>,
    /// `sup_k E‖u_k(τ_k)‖⁴_{L⁴}` per δ.
    pub sup_l4: Vec<f64>,
    /// `max/min − 1` of `sup_l4` across δ.
    pub spread: f64,
    pub pass: bool,
}

/// `E‖u_k(τ_k)‖^p_{L^p}` for `p = 2, 4`, where `u_k(τ_k) = e^{-hᵀY_{τ_{k-1}}}`
/// times the propagated field at knot `k`, for schedules related by
/// δ-halving. Observation paths are simulated once on the finest schedule.
pub fn l4_stability_check(
    model: &FilterModel,
    grid: &Arc<Grid>,
    schedules: &[TimeSchedule],
    seeds: &[u64],
    options: &CheckOptions,
) -> Result<L4Report> {
    check_seeds(seeds, 10)?;
    ensure!(schedules.len() >= 2, "at least two schedules required");
    for w in schedules.windows(2) {
        ensure!(
            w[1].terminal() == w[0].terminal() && w[1].steps() == 2 * w[0].steps(),
            "schedules must be successive δ-halvings of one horizon"
        );
    }
    let finest = *schedules.last().unwrap();
    let paths = observation_paths(model, &finest, options.law, options.sim_substeps, seeds)?;
    let h = NodeObservations::new(model, grid)?;

    let mut sup_l2 = Vec::new();
    let mut sup_l4 = Vec::new();
    for s in schedules {
        let factor = finest.steps() / s.steps();
        let filter = YauYauFilter::new(model, grid, s.delta(), options.filter)?;
        let per_seed: Vec<Vec<[f64; 2]>> = paths
            .par_iter()
            .map(|p| {
                let obs = p.subsample(factor)?;
                let mut logs = vec![[0.0; 2]; s.steps() + 1];
                filter.run_with(&obs, &[], |k, stage, field| {
                    if stage == Stage::Propagated {
                        let y = obs.at(k - 1);
                        logs[k] = [log_lp(field, 2.0, Some((&h, y))), log_lp(field, 4.0, Some((&h, y)))];
                    }
                })?;
                Ok(logs)
            })
            .collect::<Result<_>>()?;
        let sup = |p: usize| {
            (1..=s.steps())
                .map(|k| log_mean_exp(&per_seed.iter().map(|l| l[k][p]).collect::<Vec<_>>()).exp())
                .fold(f64::NEG_INFINITY, f64::max)
        };
        sup_l2.push(sup(0));
        sup_l4.push(sup(1));
    }
    let max = sup_l4.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = sup_l4.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = max / min - 1.0;
    Ok(L4Report {
        seeds: seeds.len(),
        deltas: schedules.iter().map(|s| s.delta()).collect(),
        sup_l2,
        sup_l4,
        spread,
        pass: spread.is_finite() && spread < STABILITY_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpMomentRow {
    pub delta: f64,
    pub amplification: f64,
    pub stderr: f64,
    pub samples: usize,
    /// `e^{8|c|²δ}` when `h ≡ c` on the support of the field.
    pub closed_form: Option<f64>,
    /// Closed form within three standard errors.
    pub matches_closed_form: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpMomentReport {
    pub rows: Vec<ExpMomentRow>,
    /// Weighted fit of `amplification − 1` against δ.
    pub fit: Option<LineFit>,
    pub pass: bool,
}

/// Monte-Carlo estimate of `E∫(e^{hᵀΔY} v)⁴ / ∫v⁴` with `ΔY ~ N(0, δI)`
/// for each δ, and a check that the excess over 1 is linear in δ through
/// the origin.
pub fn exp_moment_lemma_check(
    model: &FilterModel,
    field: &DensityField,
    deltas: &[f64],
    samples: usize,
    seed: u64,
) -> Result<ExpMomentReport> {
    ensure!(samples >= 100, "at least 100 samples per δ required, got {samples}");
    ensure!(!deltas.is_empty(), "no δ values given");
    ensure!(deltas.iter().all(|d| *d > 0.0), "δ values must be positive");
    let grid = field.grid();
    let h = NodeObservations::new(model, grid)?;
    let m = model.obs_dim();
    let support: Vec<usize> = (0..field.values().len()).filter(|&i| field.values()[i] > 0.0).collect();
    ensure!(!support.is_empty(), "field has empty support");
    let base: Vec<f64> = support
        .iter()
        .map(|&i| grid.quadrature_weight(i).ln() + 4.0 * field.values()[i].ln())
        .collect();
    let log_den = log_sum_exp(&base);

    let first = h.at(support[0]).to_vec();
    let constant = support
        .iter()
        .all(|&i| h.at(i).iter().zip(&first).all(|(a, b)| (a - b).abs() <= 1e-14));

    let mut rows = Vec::new();
    for (di, &delta) in deltas.iter().enumerate() {
        let amps: Vec<f64> = (0..samples)
            .into_par_iter()
            .map(|j| {
                let mut dy = vec![0.0; m];
                rng::fill_normal(&mut rng::keyed(seed, di as u64, j as u64), delta.sqrt(), &mut dy);
                let terms: Vec<f64> = support
                    .iter()
                    .zip(&base)
                    .map(|(&i, b)| b + 4.0 * h.at(i).iter().zip(&dy).map(|(a, y)| a * y).sum::<f64>())
                    .collect();
                (log_sum_exp(&terms) - log_den).exp()
            })
            .collect();
        let (amplification, stderr) = mean_stderr(&amps);
        let closed_form = constant.then(|| (8.0 * first.iter().map(|c| c * c).sum::<f64>() * delta).exp());
        rows.push(ExpMomentRow {
            delta,
            amplification,
            stderr,
            samples,
            closed_form,
            matches_closed_form: closed_form.map(|c| (amplification - c).abs() <= 3.0 * stderr + 1e-12),
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.amplification - 1.0).collect();
    let se: Vec<f64> = rows.iter().map(|r| r.stderr).collect();
    let fit = wls_known(&x, &y, &se);
    let through_origin = match fit {
        Some(f) => f.intercept.abs() <= 2.0 * f.intercept_se + 1e-12,
        None => false,
    };
    let pass = through_origin && rows.iter().all(|r| r.matches_closed_form != Some(false));
    Ok(ExpMomentReport { rows, fit, pass })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct L4GrowthReport {
    pub times: Vec<f64>,
    /// `‖v(t)‖⁴_{L⁴} / ‖v(0)‖⁴_{L⁴}`.
    pub ratios: Vec<f64>,
    /// Rate `C` fitted at the knot closest to the fit time.
    pub fit_time: f64,
    pub rate: f64,
    pub max_clamp_ratio: f64,
    /// Whether the bound also holds on `[0, fit_time)`.
    pub holds_before_fit: bool,
    /// The bound holds on `[fit_time, T]`.
    pub pass: bool,
}

/// Propagates `initial` by the semigroup of the unobserved model (no
/// potential) and checks `‖v(t)‖⁴ ≤ e^{C t} ‖v(0)‖⁴` for `t >= fit_time`,
/// with `C` fitted once at `fit_time`.
pub fn pde_l4_growth_check(
    model: &FilterModel,
    initial: &DensityField,
    schedule: &TimeSchedule,
    substeps: usize,
    fit_time: f64,
) -> Result<L4GrowthReport> {
    ensure!(
        fit_time > 0.0 && fit_time <= schedule.terminal(),
        "fit time must lie in (0, T]"
    );
    let grid = initial.grid();
    let generator = assemble_transport(&model.unobserved(), grid)?;
    let propagator = Propagator::new(&generator, schedule.delta(), substeps)?;
    let mut field = initial.clone();
    let l0 = log_lp(&field, 4.0, None);
    let mut ratios = vec![1.0];
    let mut max_clamp_ratio: f64 = 0.0;
    for _ in 1..=schedule.steps() {
        let stats = propagator.advance(&mut field)?;
        max_clamp_ratio = max_clamp_ratio.max(stats.clamped_mass / mass(&field).mantissa);
        ratios.push((log_lp(&field, 4.0, None) - l0).exp());
    }
    let times: Vec<f64> = schedule.knots().collect();
    let k_fit = (fit_time / schedule.delta()).round().max(1.0) as usize;
    let rate = ratios[k_fit].ln() / times[k_fit];
    let within = |k: usize| ratios[k].is_finite() && ratios[k] <= (rate * times[k]).exp() * (1.0 + 1e-9);
    Ok(L4GrowthReport {
        fit_time: times[k_fit],
        rate,
        max_clamp_ratio,
        holds_before_fit: (0..k_fit).all(within),
        pass: (k_fit..times.len()).all(within),
        times,
        ratios,
    })
}
