//! Euler–Maruyama simulation of the state/observation system and the path
//! containers every filter consumes.

use std::io::{Read, Write};

use crate::error::{ensure, Error, Result};
use crate::model::{FilterModel, TimeSchedule, MAX_DIM};
use crate::rng;

/// Time-indexed vectors on the knots of a schedule, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotSeries {
    schedule: TimeSchedule,
    dim: usize,
    values: Vec<f64>,
}

impl KnotSeries {
    fn new(schedule: TimeSchedule, dim: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(dim >= 1, "series dimension must be positive");
        ensure!(
            values.len() == (schedule.steps() + 1) * dim,
            "expected {} values, got {}",
            (schedule.steps() + 1) * dim,
            values.len()
        );
        Ok(Self {
            schedule,
            dim,
            values,
        })
    }

    pub fn schedule(&self) -> &TimeSchedule {
        &self.schedule
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.schedule.steps() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    fn subsample(&self, factor: usize) -> Result<Self> {
        let schedule = self.schedule.coarsen(factor)?;
        let values = (0..=schedule.steps())
            .flat_map(|k| self.at(k * factor).iter().copied())
            .collect();
        Self::new(schedule, self.dim, values)
    }
}

/// Samples of `X` at the knots.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath(KnotSeries);

impl StatePath {
    pub fn new(schedule: TimeSchedule, dim: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.iter().all(|v| v.is_finite()),
            "state path contains non-finite values"
        );
        KnotSeries::new(schedule, dim, values).map(Self)
    }

    pub fn subsample(&self, factor: usize) -> Result<Self> {
        self.0.subsample(factor).map(Self)
    }
}

impl std::ops::Deref for StatePath {
    type Target = KnotSeries;
    fn deref(&self) -> &KnotSeries {
        &self.0
    }
}

/// Samples of `Y` at the knots, with `Y_{τ_0} = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath(KnotSeries);

impl ObservationPath {
    pub fn new(schedule: TimeSchedule, dim: usize, values: Vec<f64>) -> Result<Self> {
        let series = KnotSeries::new(schedule, dim, values)?;
        ensure!(
            series.at(0).iter().all(|&v| v == 0.0),
            "observation path must start at Y = 0"
        );
        ensure!(
            series.values.iter().all(|v| v.is_finite()),
            "observation path contains non-finite values"
        );
        Ok(Self(series))
    }

    /// Rebuilds a path from its increments by prefix summation.
    pub fn from_increments(schedule: TimeSchedule, dim: usize, increments: &[Vec<f64>]) -> Result<Self> {
        ensure!(
            increments.len() == schedule.steps(),
            "expected {} increments",
            schedule.steps()
        );
        let mut values = vec![0.0; dim];
        let mut acc = vec![0.0; dim];
        for dy in increments {
            ensure!(dy.len() == dim, "increment dimension mismatch");
            for (a, v) in acc.iter_mut().zip(dy) {
                *a += v;
            }
            values.extend_from_slice(&acc);
        }
        Self::new(schedule, dim, values)
    }

    /// Keeps every `factor`-th knot.
    pub fn subsample(&self, factor: usize) -> Result<Self> {
        self.0.subsample(factor).map(Self)
    }

    /// `ΔY_k = Y_{τ_k} - Y_{τ_{k-1}}` written into `out`.
    pub fn increment_into(&self, k: usize, out: &mut [f64]) {
        let (a, b) = (self.at(k - 1), self.at(k));
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o = y - x;
        }
    }
}

impl std::ops::Deref for ObservationPath {
    type Target = KnotSeries;
    fn deref(&self) -> &KnotSeries {
        &self.0
    }
}

/// `ΔY_k` for `k = 1..=K`.
pub fn observation_increments(path: &ObservationPath) -> Vec<Vec<f64>> {
    (1..path.len())
        .map(|k| {
            let mut dy = vec![0.0; path.dim()];
            path.increment_into(k, &mut dy);
            dy
        })
        .collect()
}

/// Simulates path 0 of `seed`. See [`simulate_path`].
pub fn simulate(
    model: &FilterModel,
    schedule: &TimeSchedule,
    substeps: usize,
    seed: u64,
) -> Result<(StatePath, ObservationPath)> {
    simulate_path(model, schedule, substeps, seed, 0)
}

/// Euler–Maruyama on `δ / substeps`, recording `X` and `Y` at the knots.
///
/// The observation integral is accumulated at the fine resolution. Draws
/// are keyed by `(seed, path, fine step)`, so a replica does not depend on
/// which other replicas were simulated.
pub fn simulate_path(
    model: &FilterModel,
    schedule: &TimeSchedule,
    substeps: usize,
    seed: u64,
    path: u64,
) -> Result<(StatePath, ObservationPath)> {
    ensure!(substeps >= 1, "substeps must be >= 1");
    let d = model.dim();
    let p = model.noise_dim();
    let m = model.obs_dim();
    let dt = schedule.delta() / substeps as f64;
    let sqdt = dt.sqrt();

    let mut x = vec![0.0; d];
    model.sample_initial(&mut rng::keyed(seed, path, 0), &mut x);
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteState { knot: 0 });
    }
    let mut y = vec![0.0; m];
    let mut xs = x.clone();
    let mut ys = vec![0.0; m];
    xs.reserve(schedule.steps() * d);
    ys.reserve(schedule.steps() * m);

    let mut f = [0.0; MAX_DIM];
    let mut g = [0.0; MAX_DIM * MAX_DIM * 4];
    let mut h = [0.0; MAX_DIM * 4];
    let mut noise = [0.0; MAX_DIM * 8];
    for k in 1..=schedule.steps() {
        for s in 0..substeps {
            let step = ((k - 1) * substeps + s) as u64 + 1;
            let mut r = rng::keyed(seed, path, step);
            rng::fill_normal(&mut r, sqdt, &mut noise[..p + m]);
            let (dv, dw) = noise[..p + m].split_at(p);
            model.drift(&x, &mut f[..d]);
            model.diffusion(&x, &mut g[..d * p]);
            model.observation(&x, &mut h[..m]);
            for j in 0..m {
                y[j] += h[j] * dt + dw[j];
            }
            for i in 0..d {
                let gdv: f64 = (0..p).map(|c| g[i * p + c] * dv[c]).sum();
                x[i] += f[i] * dt + gdv;
            }
        }
        if !x.iter().chain(&y).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { knot: k });
        }
        xs.extend_from_slice(&x);
        ys.extend_from_slice(&y);
    }
    Ok((
        StatePath::new(*schedule, d, xs)?,
        ObservationPath::new(*schedule, m, ys)?,
    ))
}

/// An observation path under the reference measure, where `Y` is a standard
/// Brownian motion independent of the state.
pub fn simulate_reference_observations(
    obs_dim: usize,
    schedule: &TimeSchedule,
    substeps: usize,
    seed: u64,
    path: u64,
) -> Result<ObservationPath> {
    ensure!(substeps >= 1, "substeps must be >= 1");
    let dt = schedule.delta() / substeps as f64;
    let mut y = vec![0.0; obs_dim];
    let mut dw = vec![0.0; obs_dim];
    let mut ys = y.clone();
    for k in 1..=schedule.steps() {
        for s in 0..substeps {
            let step = ((k - 1) * substeps + s) as u64 + 1;
            rng::fill_normal(&mut rng::keyed(seed, path, step), dt.sqrt(), &mut dw);
            for (a, b) in y.iter_mut().zip(&dw) {
                *a += b;
            }
        }
        ys.extend_from_slice(&y);
    }
    ObservationPath::new(*schedule, obs_dim, ys)
}

/// Writes `t, X_1..X_d, Y_1..Y_m` with a mandatory header row, optionally
/// preceded by a `#` comment line.
pub fn write_paths_csv<W: Write>(
    mut out: W,
    state: &StatePath,
    obs: &ObservationPath,
    comment: Option<&str>,
) -> Result<()> {
    ensure!(
        state.schedule() == obs.schedule(),
        "state and observation schedules differ"
    );
    if let Some(c) = comment {
        writeln!(out, "# {c}")?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((1..=state.dim()).map(|i| format!("X_{i}")));
    header.extend((1..=obs.dim()).map(|i| format!("Y_{i}")));
    w.write_record(&header)?;
    for k in 0..state.len() {
        let mut row = vec![state.schedule().knot(k).to_string()];
        row.extend(state.at(k).iter().map(f64::to_string));
        row.extend(obs.at(k).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV written by [`write_paths_csv`]; `#` lines are skipped.
pub fn read_paths_csv<R: Read>(input: R) -> Result<(StatePath, ObservationPath)> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header = rdr.headers()?.clone();
    ensure!(
        header.get(0) == Some("t"),
        "first column must be `t`"
    );
    let d = header.iter().filter(|h| h.starts_with("X_")).count();
    let m = header.iter().filter(|h| h.starts_with("Y_")).count();
    ensure!(
        d >= 1 && m >= 1 && header.len() == 1 + d + m,
        "header must be t, X_1..X_d, Y_1..Y_m"
    );
    let mut ts = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("row {}: bad field {i}", line + 1)))
        };
        ts.push(parse(0)?);
        for i in 0..d {
            xs.push(parse(1 + i)?);
        }
        for i in 0..m {
            ys.push(parse(1 + d + i)?);
        }
    }
    let schedule = schedule_from_times(&ts)?;
    Ok((
        StatePath::new(schedule, d, xs)?,
        ObservationPath::new(schedule, m, ys)?,
    ))
}

fn schedule_from_times(ts: &[f64]) -> Result<TimeSchedule> {
    ensure!(ts.len() >= 2, "path needs at least two knots");
    ensure!(ts[0] == 0.0, "path must start at t = 0");
    let s = TimeSchedule::new(ts[ts.len() - 1], ts.len() - 1)?;
    for (k, &t) in ts.iter().enumerate() {
        ensure!(
            (t - s.knot(k)).abs() <= 1e-9 * s.terminal().max(1.0),
            "knot {k} at t = {t} is not on a uniform schedule"
        );
    }
    Ok(s)
}

pub const BINARY_MAGIC: &[u8; 7] = b"YYPATH1";

/// Little-endian cache: magic, `u32 d`, `u32 m`, `u64 K`, `f64 T`, then
/// `K + 1` rows of `t, X.., Y..` as `f64`.
pub fn write_paths_binary<W: Write>(mut out: W, state: &StatePath, obs: &ObservationPath) -> Result<()> {
    ensure!(
        state.schedule() == obs.schedule(),
        "state and observation schedules differ"
    );
    let s = state.schedule();
    out.write_all(BINARY_MAGIC)?;
    out.write_all(&(state.dim() as u32).to_le_bytes())?;
    out.write_all(&(obs.dim() as u32).to_le_bytes())?;
    out.write_all(&(s.steps() as u64).to_le_bytes())?;
    out.write_all(&s.terminal().to_le_bytes())?;
    for k in 0..state.len() {
        out.write_all(&s.knot(k).to_le_bytes())?;
        for v in state.at(k).iter().chain(obs.at(k)) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_paths_binary<R: Read>(mut input: R) -> Result<(StatePath, ObservationPath)> {
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic)?;
    if &magic != BINARY_MAGIC {
        return Err(Error::Format("missing YYPATH1 magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b4)?;
    let d = u32::from_le_bytes(b4) as usize;
    input.read_exact(&mut b4)?;
    let m = u32::from_le_bytes(b4) as usize;
    input.read_exact(&mut b8)?;
    let steps = u64::from_le_bytes(b8) as usize;
    input.read_exact(&mut b8)?;
    let schedule = TimeSchedule::new(f64::from_le_bytes(b8), steps)?;
    let mut read_f64 = || -> Result<f64> {
        input.read_exact(&mut b8)?;
        Ok(f64::from_le_bytes(b8))
    };
    let mut xs = Vec::with_capacity((steps + 1) * d);
    let mut ys = Vec::with_capacity((steps + 1) * m);
    for _ in 0..=steps {
        read_f64()?;
        for _ in 0..d {
            xs.push(read_f64()?);
        }
        for _ in 0..m {
            ys.push(read_f64()?);
        }
    }
    Ok((
        StatePath::new(schedule, d, xs)?,
        ObservationPath::new(schedule, m, ys)?,
    ))
}
