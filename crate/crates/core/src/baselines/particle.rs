//! Weighted Monte-Carlo reference estimators.
//!
//! Both estimators keep one random stream per particle slot, keyed by
//! `(seed, slot)`, and advance all slots in lock-step over the knots. A slot
//! keeps its stream across resampling, so the output does not depend on how
//! the slots are scheduled over workers.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, Result};
use crate::model::{FilterModel, TestFunction, TimeSchedule, MAX_DIM};
use crate::rng::{self, AUX_STREAM_BASE};
use crate::sde::ObservationPath;
use crate::stats::log_sum_exp;

/// ESS below this is flagged as degenerate.
pub const DEGENERACY_ESS: f64 = 10.0;

/// Particles stored row-major (`dim` values each) with unnormalised
/// log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedEnsemble {
    dim: usize,
    particles: Vec<f64>,
    log_weights: Vec<f64>,
}

impl WeightedEnsemble {
    pub fn new(dim: usize, particles: Vec<f64>, log_weights: Vec<f64>) -> Result<Self> {
        ensure!(dim >= 1, "dimension must be >= 1");
        ensure!(
            particles.len() == dim * log_weights.len(),
            "particle buffer has {} values, expected {}",
            particles.len(),
            dim * log_weights.len()
        );
        ensure!(!log_weights.is_empty(), "ensemble must not be empty");
        Ok(Self {
            dim,
            particles,
            log_weights,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.log_weights);
        if !lse.is_finite() {
            return vec![1.0 / self.len() as f64; self.len()];
        }
        self.log_weights.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn ess(&self) -> f64 {
        ess(&self.normalized_weights())
    }

    /// Self-normalised estimate of `E[φ]` and its delta-method standard
    /// error `sqrt(Σ wᵢ² (φᵢ − φ̄)²)`.
    pub fn estimate(&self, phi: &TestFunction) -> (f64, f64) {
        let w = self.normalized_weights();
        let values: Vec<f64> = (0..self.len()).map(|i| phi.eval(self.particle(i))).collect();
        weighted_mean_se(&w, &values)
    }

    /// Replaces the ensemble by a systematic resample driven by the single
    /// uniform `u ∈ [0, 1)`; weights become equal.
    pub fn resample(&mut self, u: f64) {
        let idx = systematic_resample(&self.normalized_weights(), u);
        let d = self.dim;
        let mut next = Vec::with_capacity(self.particles.len());
        for &i in &idx {
            next.extend_from_slice(&self.particles[i * d..(i + 1) * d]);
        }
        self.particles = next;
        self.log_weights.fill(0.0);
    }
}

/// `1 / Σ wᵢ²` for normalised weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: one uniform, `N` evenly spaced positions.
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for j in 0..n {
        let pos = (u + j as f64) / n as f64;
        while pos > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

fn weighted_mean_se(w: &[f64], values: &[f64]) -> (f64, f64) {
    let mean: f64 = w.iter().zip(values).map(|(a, b)| a * b).sum();
    let var: f64 = w
        .iter()
        .zip(values)
        .map(|(a, b)| a * a * (b - mean).powi(2))
        .sum();
    (mean, var.sqrt())
}

/// How the weighted Monte-Carlo standard error is computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StdErr {
    /// Delta method for the ratio estimator.
    Delta,
    /// Nonparametric bootstrap over particles.
    Bootstrap { replicates: usize },
}

/// Per-knot weighted estimates with standard errors. Row 0 is the prior
/// sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloOutput {
    pub schedule: TimeSchedule,
    pub labels: Vec<String>,
    pub estimates: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub ess: Vec<f64>,
    /// Knots where ESS fell below [`DEGENERACY_ESS`].
    pub degenerate: Vec<usize>,
}

impl MonteCarloOutput {
    pub fn column(&self, label: &str) -> Option<(Vec<f64>, Vec<f64>)> {
        let j = self.labels.iter().position(|l| l == label)?;
        Some((
            self.estimates.iter().map(|r| r[j]).collect(),
            self.stderr.iter().map(|r| r[j]).collect(),
        ))
    }

    /// `t, <labels>, <label>_se..., ess`.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        let mut header = vec!["t".to_string()];
        header.extend(self.labels.iter().cloned());
        header.extend(self.labels.iter().map(|l| format!("{l}_se")));
        header.push("ess".into());
        writeln!(out, "{}", header.join(","))?;
        for (k, (est, se)) in self.estimates.iter().zip(&self.stderr).enumerate() {
            let mut row = vec![self.schedule.knot(k).to_string()];
            row.extend(est.iter().map(f64::to_string));
            row.extend(se.iter().map(f64::to_string));
            row.push(self.ess[k].to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Particle slots with their private streams.
struct Swarm {
    dim: usize,
    x: Vec<f64>,
    log_w: Vec<f64>,
    rngs: Vec<ChaCha8Rng>,
}

impl Swarm {
    fn sample(model: &FilterModel, n: usize, seed: u64) -> Self {
        let d = model.dim();
        let mut rngs: Vec<ChaCha8Rng> = (0..n as u64).map(|i| rng::stream(seed, i)).collect();
        let mut x = vec![0.0; n * d];
        x.par_chunks_mut(d)
            .zip(rngs.par_iter_mut())
            .for_each(|(xi, r)| model.sample_initial(r, xi));
        Self {
            dim: d,
            x,
            log_w: vec![0.0; n],
            rngs,
        }
    }

    /// Euler–Maruyama over `substeps` steps of `dt`, adding
    /// `h(X)ᵀ dy − ½|h(X)|² dt` to the log-weight before each move.
    fn advance(&mut self, model: &FilterModel, dt: f64, substeps: usize, dy: &[f64]) {
        let d = self.dim;
        let p = model.noise_dim();
        let m = model.obs_dim();
        let sqdt = dt.sqrt();
        self.x
            .par_chunks_mut(d)
            .zip(self.log_w.par_iter_mut())
            .zip(self.rngs.par_iter_mut())
            .for_each(|((x, lw), r)| {
                let mut f = [0.0; MAX_DIM];
                let mut g = [0.0; MAX_DIM * MAX_DIM * 4];
                let mut h = [0.0; MAX_DIM * 4];
                let mut dv = [0.0; MAX_DIM * 4];
                for _ in 0..substeps {
                    model.observation(x, &mut h[..m]);
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += h[j] * dy[j] - 0.5 * h[j] * h[j] * dt;
                    }
                    *lw += acc;
                    model.drift(x, &mut f[..d]);
                    model.diffusion(x, &mut g[..d * p]);
                    rng::fill_normal(r, sqdt, &mut dv[..p]);
                    for i in 0..d {
                        let gdv: f64 = (0..p).map(|c| g[i * p + c] * dv[c]).sum();
                        x[i] += f[i] * dt + gdv;
                    }
                }
            });
    }

    /// Pure state move, weight applied afterwards at the new position.
    fn move_only(&mut self, model: &FilterModel, dt: f64) {
        let d = self.dim;
        let p = model.noise_dim();
        let sqdt = dt.sqrt();
        self.x
            .par_chunks_mut(d)
            .zip(self.rngs.par_iter_mut())
            .for_each(|(x, r)| {
                let mut f = [0.0; MAX_DIM];
                let mut g = [0.0; MAX_DIM * MAX_DIM * 4];
                let mut dv = [0.0; MAX_DIM * 4];
                model.drift(x, &mut f[..d]);
                model.diffusion(x, &mut g[..d * p]);
                rng::fill_normal(r, sqdt, &mut dv[..p]);
                for i in 0..d {
                    let gdv: f64 = (0..p).map(|c| g[i * p + c] * dv[c]).sum();
                    x[i] += f[i] * dt + gdv;
                }
            });
    }

    fn weight(&mut self, model: &FilterModel, dt: f64, dy: &[f64]) {
        let d = self.dim;
        let m = model.obs_dim();
        self.x
            .par_chunks(d)
            .zip(self.log_w.par_iter_mut())
            .for_each(|(x, lw)| {
                let mut h = [0.0; MAX_DIM * 4];
                model.observation(x, &mut h[..m]);
                for j in 0..m {
                    *lw += h[j] * dy[j] - 0.5 * h[j] * h[j] * dt;
                }
            });
    }

    fn weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.log_w);
        self.log_w.iter().map(|l| (l - lse).exp()).collect()
    }

    fn values(&self, phi: &TestFunction) -> Vec<f64> {
        self.x.par_chunks(self.dim).map(|x| phi.eval(x)).collect()
    }

    fn resample(&mut self, weights: &[f64], u: f64) {
        let idx = systematic_resample(weights, u);
        let d = self.dim;
        let mut next = vec![0.0; self.x.len()];
        for (j, &i) in idx.iter().enumerate() {
            next[j * d..(j + 1) * d].copy_from_slice(&self.x[i * d..(i + 1) * d]);
        }
        self.x = next;
        self.log_w.fill(0.0);
    }
}

fn check_inputs(model: &FilterModel, schedule: &TimeSchedule, obs: &ObservationPath, n: usize) -> Result<()> {
    ensure!(n >= 1, "particle count must be >= 1");
    ensure!(
        obs.schedule() == schedule,
        "observation path is not on the requested schedule"
    );
    ensure!(
        obs.dim() == model.obs_dim(),
        "observation dimension {} does not match model ({})",
        obs.dim(),
        model.obs_dim()
    );
    Ok(())
}

struct Recorder {
    estimates: Vec<Vec<f64>>,
    stderr: Vec<Vec<f64>>,
    ess: Vec<f64>,
    degenerate: Vec<usize>,
}

impl Recorder {
    fn new(k: usize) -> Self {
        Self {
            estimates: Vec::with_capacity(k + 1),
            stderr: Vec::with_capacity(k + 1),
            ess: Vec::with_capacity(k + 1),
            degenerate: Vec::new(),
        }
    }

    fn record(&mut self, k: usize, swarm: &Swarm, w: &[f64], tests: &[TestFunction], se: StdErr, seed: u64) {
        let mut est = Vec::with_capacity(tests.len());
        let mut err = Vec::with_capacity(tests.len());
        for (t, phi) in tests.iter().enumerate() {
            let values = swarm.values(phi);
            let (mean, delta_se) = weighted_mean_se(w, &values);
            est.push(mean);
            err.push(match se {
                StdErr::Delta => delta_se,
                StdErr::Bootstrap { replicates } => {
                    let stream = AUX_STREAM_BASE + 1 + (k * tests.len() + t) as u64;
                    bootstrap_se(&swarm.log_w, &values, replicates, seed, stream)
                }
            });
        }
        let e = ess(w);
        if e < DEGENERACY_ESS {
            self.degenerate.push(k);
        }
        self.estimates.push(est);
        self.stderr.push(err);
        self.ess.push(e);
    }

    fn finish(self, schedule: &TimeSchedule, tests: &[TestFunction], what: &str) -> MonteCarloOutput {
        if !self.degenerate.is_empty() {
            log::warn!(
                "{what}: weight degeneracy (ESS < {DEGENERACY_ESS}) at {} knots",
                self.degenerate.len()
            );
        }
        MonteCarloOutput {
            schedule: *schedule,
            labels: tests.iter().map(|t| t.label().to_string()).collect(),
            estimates: self.estimates,
            stderr: self.stderr,
            ess: self.ess,
            degenerate: self.degenerate,
        }
    }
}

/// Standard deviation of the self-normalised estimate over `replicates`
/// resamples of the particle indices.
fn bootstrap_se(log_w: &[f64], values: &[f64], replicates: usize, seed: u64, stream: u64) -> f64 {
    let n = values.len();
    if n < 2 || replicates < 2 {
        return f64::NAN;
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let mut r = rng::stream(seed, stream);
    let stats: Vec<f64> = (0..replicates)
        .map(|_| {
            let (mut num, mut den) = (0.0, 0.0);
            for _ in 0..n {
                let i = r.random_range(0..n);
                num += w[i] * values[i];
                den += w[i];
            }
            num / den
        })
        .collect();
    let mean = stats.iter().sum::<f64>() / replicates as f64;
    (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (replicates - 1) as f64).sqrt()
}

/// Kallianpur–Striebel estimator under the reference measure: `N` free
/// state paths weighted by `exp(Σ h(X)ᵀ ΔY − ½ Σ |h(X)|² dt)`.
///
/// The weight integral runs on `δ / substeps`, with the observation
/// interpolated linearly between knots.
#[allow(clippy::too_many_arguments)]
pub fn ks_monte_carlo(
    model: &FilterModel,
    schedule: &TimeSchedule,
    obs: &ObservationPath,
    tests: &[TestFunction],
    particles: usize,
    substeps: usize,
    seed: u64,
    se: StdErr,
) -> Result<MonteCarloOutput> {
    check_inputs(model, schedule, obs, particles)?;
    ensure!(substeps >= 1, "substeps must be >= 1");
    let dt = schedule.delta() / substeps as f64;
    let m = model.obs_dim();
    let mut swarm = Swarm::sample(model, particles, seed);
    let mut rec = Recorder::new(schedule.steps());
    let mut dy = vec![0.0; m];
    rec.record(0, &swarm, &swarm.weights(), tests, se, seed);
    for k in 1..=schedule.steps() {
        obs.increment_into(k, &mut dy);
        for v in &mut dy {
            *v /= substeps as f64;
        }
        swarm.advance(model, dt, substeps, &dy);
        // the last sub-interval's weight is evaluated at its left end, so
        // the knot state itself enters the next interval
        let w = swarm.weights();
        rec.record(k, &swarm, &w, tests, se, seed);
    }
    Ok(rec.finish(schedule, tests, "ks_monte_carlo"))
}

/// Bootstrap particle filter with one Euler–Maruyama step per interval,
/// weights `exp(h(X)ᵀ ΔY − ½|h(X)|² δ)` at the propagated particles and
/// systematic resampling whenever ESS < N/2.
///
/// Estimates are read before resampling.
pub fn bootstrap_pf(
    model: &FilterModel,
    schedule: &TimeSchedule,
    obs: &ObservationPath,
    tests: &[TestFunction],
    particles: usize,
    seed: u64,
) -> Result<MonteCarloOutput> {
    check_inputs(model, schedule, obs, particles)?;
    let delta = schedule.delta();
    let mut swarm = Swarm::sample(model, particles, seed);
    let mut rec = Recorder::new(schedule.steps());
    let mut dy = vec![0.0; model.obs_dim()];
    rec.record(0, &swarm, &swarm.weights(), tests, StdErr::Delta, seed);
    for k in 1..=schedule.steps() {
        obs.increment_into(k, &mut dy);
        swarm.move_only(model, delta);
        swarm.weight(model, delta, &dy);
        let w = swarm.weights();
        rec.record(k, &swarm, &w, tests, StdErr::Delta, seed);
        if ess(&w) < particles as f64 / 2.0 {
            let u: f64 = rng::keyed(seed, AUX_STREAM_BASE, k as u64).random();
            swarm.resample(&w, u);
        }
    }
    Ok(rec.finish(schedule, tests, "bootstrap_pf"))
}
