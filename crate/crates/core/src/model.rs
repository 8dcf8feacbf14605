//! Filtering systems, their declared regularity constants, test functions
//! and the built-in benchmark registry.
//!
//! A [`FilterModel`] bundles the state drift `f`, the diffusion `g`, its
//! square `a = g gᵀ`, the observation function `h` and the prior density.
//! Coefficients are plain callbacks that write into caller-owned buffers so
//! the particle loops never allocate. Matrices are row-major.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure, Error, Result};
use crate::rng;

pub const MAX_DIM: usize = 3;

pub type VectorFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type SamplerFn = Arc<dyn Fn(&mut dyn RngCore, &mut [f64]) + Send + Sync>;

/// Declared constants of the standing assumptions: Lipschitz drift and
/// diffusion (A1), uniform ellipticity on the truncation domain (A2),
/// finite prior moments up to order `2n` (A3) and polynomial growth of the
/// test functions (A4).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AssumptionProfile {
    pub lipschitz: f64,
    pub ellipticity: f64,
    pub moment_order: u32,
    pub growth_order: u32,
    pub growth_constant: f64,
}

impl AssumptionProfile {
    pub fn new(
        lipschitz: f64,
        ellipticity: f64,
        moment_order: u32,
        growth_order: u32,
        growth_constant: f64,
    ) -> Result<Self> {
        ensure!(
            lipschitz > 0.0 && ellipticity > 0.0 && growth_constant > 0.0,
            "assumption constants must be strictly positive"
        );
        ensure!(
            moment_order > 0 && growth_order > 0,
            "moment and growth orders must be positive"
        );
        Ok(Self {
            lipschitz,
            ellipticity,
            moment_order,
            growth_order,
            growth_constant,
        })
    }
}

impl Default for AssumptionProfile {
    fn default() -> Self {
        Self {
            lipschitz: 1.0,
            ellipticity: 1.0,
            moment_order: 2,
            growth_order: 1,
            growth_constant: 1.0,
        }
    }
}

/// A test function `φ` with its declared growth `|φ(x)| <= L (1 + |x|^{2m})`.
#[derive(Clone)]
pub struct TestFunction {
    label: String,
    growth_order: u32,
    growth_constant: f64,
    eval: ScalarFn,
}

impl TestFunction {
    pub fn new(
        label: impl Into<String>,
        growth_order: u32,
        growth_constant: f64,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            growth_order,
            growth_constant,
            eval: Arc::new(eval),
        }
    }

    pub fn one() -> Self {
        Self::new("one", 1, 1.0, |_| 1.0)
    }

    /// `x_{axis+1}`, labelled `x1`, `x2`, ...
    pub fn coordinate(axis: usize) -> Self {
        Self::new(format!("x{}", axis + 1), 1, 1.0, move |x| x[axis])
    }

    pub fn coordinate_squared(axis: usize) -> Self {
        Self::new(format!("x{}^2", axis + 1), 1, 1.0, move |x| x[axis] * x[axis])
    }

    pub fn norm_squared() -> Self {
        Self::new("|x|^2", 1, 1.0, |x| x.iter().map(|v| v * v).sum())
    }

    /// Resolves the labels accepted on the command line: `one`, `x`, `x^2`,
    /// `x1`..`x3`, `x1^2`..`x3^2` and `|x|^2`.
    pub fn from_label(label: &str, dim: usize) -> Result<Self> {
        let axis = |s: &str| -> Option<usize> {
            let i: usize = s.parse().ok()?;
            (1..=dim).contains(&i).then_some(i - 1)
        };
        let tf = match label {
            "one" | "1" => Self::one(),
            "x" => Self::coordinate(0),
            "x^2" => Self::coordinate_squared(0),
            "|x|^2" => Self::norm_squared(),
            l => {
                let body = l
                    .strip_prefix('x')
                    .ok_or_else(|| Error::UnknownTestFunction(l.into()))?;
                match body.strip_suffix("^2") {
                    Some(i) => Self::coordinate_squared(
                        axis(i).ok_or_else(|| Error::UnknownTestFunction(l.into()))?,
                    ),
                    None => Self::coordinate(
                        axis(body).ok_or_else(|| Error::UnknownTestFunction(l.into()))?,
                    ),
                }
            }
        };
        Ok(tf)
    }

    pub fn with_growth(mut self, order: u32, constant: f64) -> Self {
        self.growth_order = order;
        self.growth_constant = constant;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn growth(&self) -> (u32, f64) {
        (self.growth_order, self.growth_constant)
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }

    pub fn growth_bound(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        self.growth_constant * (1.0 + r2.powi(self.growth_order as i32))
    }
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("label", &self.label)
            .field("growth_order", &self.growth_order)
            .field("growth_constant", &self.growth_constant)
            .finish()
    }
}

/// Uniform partition `0 = τ_0 < ... < τ_K = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeSchedule {
    terminal: f64,
    steps: usize,
}

impl TimeSchedule {
    pub fn new(terminal: f64, steps: usize) -> Result<Self> {
        ensure!(terminal.is_finite() && terminal > 0.0, "T must be positive");
        ensure!(steps >= 1, "K must be >= 1");
        Ok(Self { terminal, steps })
    }

    pub fn terminal(&self) -> f64 {
        self.terminal
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn delta(&self) -> f64 {
        self.terminal / self.steps as f64
    }

    /// Knot `τ_k`, computed as `k δ` (never by accumulation); `τ_K` is `T`.
    pub fn knot(&self, k: usize) -> f64 {
        if k == self.steps {
            self.terminal
        } else {
            k as f64 * self.delta()
        }
    }

    pub fn knots(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(|k| self.knot(k))
    }

    pub fn refine(&self, factor: usize) -> Result<Self> {
        ensure!(factor >= 1, "refinement factor must be >= 1");
        Self::new(self.terminal, self.steps * factor)
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        ensure!(
            factor >= 1 && self.steps % factor == 0,
            "cannot coarsen {} steps by {factor}",
            self.steps
        );
        Self::new(self.terminal, self.steps / factor)
    }
}

/// Linear-Gaussian structure `f = F x`, `g = Γ`, `h = H x`, `X_0 ~ N(m_0, P_0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussian {
    pub drift: DMatrix<f64>,
    pub noise_gain: DMatrix<f64>,
    pub observation: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
}

/// A filtering system `dX = f(X) dt + g(X) dV`, `dY = h(X) dt + dW`.
#[derive(Clone)]
pub struct FilterModel {
    name: String,
    dim: usize,
    noise_dim: usize,
    obs_dim: usize,
    drift: VectorFn,
    diffusion: MatrixFn,
    diffusion_square: MatrixFn,
    observation: VectorFn,
    initial_density: ScalarFn,
    sampler: SamplerFn,
    assumptions: AssumptionProfile,
    linear: Option<LinearGaussian>,
    test_functions: Vec<TestFunction>,
}

impl fmt::Debug for FilterModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FilterModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("obs_dim", &self.obs_dim)
            .field("assumptions", &self.assumptions)
            .field("linear", &self.linear.is_some())
            .finish()
    }
}

impl FilterModel {
    pub fn builder(name: impl Into<String>, dim: usize) -> FilterModelBuilder {
        FilterModelBuilder::new(name, dim)
    }

    /// Builder pre-populated with this model's coefficients.
    pub fn rebuild(&self) -> FilterModelBuilder {
        FilterModelBuilder {
            name: self.name.clone(),
            dim: self.dim,
            noise_dim: self.noise_dim,
            obs_dim: self.obs_dim,
            drift: Some(self.drift.clone()),
            diffusion: Some(self.diffusion.clone()),
            diffusion_square: Some(self.diffusion_square.clone()),
            observation: Some(self.observation.clone()),
            initial_density: Some(self.initial_density.clone()),
            sampler: Some(self.sampler.clone()),
            assumptions: self.assumptions,
            linear: self.linear.clone(),
            test_functions: self.test_functions.clone(),
        }
    }

    /// Same system with `h ≡ 0` (uninformative observations).
    pub fn unobserved(&self) -> FilterModel {
        let mut b = self.rebuild();
        let m = self.obs_dim;
        b.observation = Some(Arc::new(|_, out: &mut [f64]| out.fill(0.0)));
        if let Some(lin) = &mut b.linear {
            lin.observation = DMatrix::zeros(m, self.dim);
        }
        b.name = format!("{}[h=0]", self.name);
        b.build_unchecked()
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    pub fn assumptions(&self) -> &AssumptionProfile {
        &self.assumptions
    }
    pub fn linear(&self) -> Option<&LinearGaussian> {
        self.linear.as_ref()
    }
    pub fn test_functions(&self) -> &[TestFunction] {
        &self.test_functions
    }

    #[inline]
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    /// `g(x)` as a `dim x noise_dim` row-major matrix.
    #[inline]
    pub fn diffusion(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    /// `a(x) = g(x) g(x)ᵀ`, `dim x dim` row-major.
    #[inline]
    pub fn diffusion_square(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion_square)(x, out)
    }

    #[inline]
    pub fn observation(&self, x: &[f64], out: &mut [f64]) {
        (self.observation)(x, out)
    }

    #[inline]
    pub fn initial_density(&self, x: &[f64]) -> f64 {
        (self.initial_density)(x)
    }

    pub fn sample_initial(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        (self.sampler)(rng, out)
    }

    /// `g gᵀ` recomputed from `g`, bypassing the stored `a`.
    pub fn diffusion_square_from_g(&self, x: &[f64], out: &mut [f64]) {
        let mut g = vec![0.0; self.dim * self.noise_dim];
        self.diffusion(x, &mut g);
        outer_square(&g, self.dim, self.noise_dim, out);
    }
}

fn outer_square(g: &[f64], d: usize, p: usize, out: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..p).map(|k| g[i * p + k] * g[j * p + k]).sum();
        }
    }
}

pub struct FilterModelBuilder {
    name: String,
    dim: usize,
    noise_dim: usize,
    obs_dim: usize,
    drift: Option<VectorFn>,
    diffusion: Option<MatrixFn>,
    diffusion_square: Option<MatrixFn>,
    observation: Option<VectorFn>,
    initial_density: Option<ScalarFn>,
    sampler: Option<SamplerFn>,
    assumptions: AssumptionProfile,
    linear: Option<LinearGaussian>,
    test_functions: Vec<TestFunction>,
}

impl FilterModelBuilder {
    fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            noise_dim: dim,
            obs_dim: dim,
            drift: None,
            diffusion: None,
            diffusion_square: None,
            observation: None,
            initial_density: None,
            sampler: None,
            assumptions: AssumptionProfile::default(),
            linear: None,
            test_functions: Vec::new(),
        }
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn drift(mut self, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self.linear = None;
        self
    }

    /// Sets `g` with `noise_dim` columns; `a` is re-derived as `g gᵀ`.
    pub fn diffusion(
        mut self,
        noise_dim: usize,
        g: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.noise_dim = noise_dim;
        self.diffusion = Some(Arc::new(g));
        self.diffusion_square = None;
        self.linear = None;
        self
    }

    /// Closed-form `a`; must agree with `g gᵀ`.
    pub fn diffusion_square(
        mut self,
        a: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.diffusion_square = Some(Arc::new(a));
        self
    }

    pub fn observation(
        mut self,
        obs_dim: usize,
        h: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.obs_dim = obs_dim;
        self.observation = Some(Arc::new(h));
        self.linear = None;
        self
    }

    pub fn initial_density(mut self, p: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.initial_density = Some(Arc::new(p));
        self.sampler = None;
        self
    }

    pub fn sampler(
        mut self,
        s: impl Fn(&mut dyn RngCore, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.sampler = Some(Arc::new(s));
        self
    }

    pub fn assumptions(mut self, profile: AssumptionProfile) -> Self {
        self.assumptions = profile;
        self
    }

    pub fn linear(mut self, lin: LinearGaussian) -> Self {
        self.linear = Some(lin);
        self
    }

    pub fn test_function(mut self, tf: TestFunction) -> Self {
        self.test_functions.push(tf);
        self
    }

    pub fn build(self) -> Result<FilterModel> {
        ensure!(
            (1..=MAX_DIM).contains(&self.dim),
            "dimension {} unsupported (1..={MAX_DIM})",
            self.dim
        );
        ensure!(
            self.noise_dim >= 1 && self.obs_dim >= 1,
            "noise and observation dimensions must be positive"
        );
        ensure!(
            self.noise_dim <= 4 * MAX_DIM && self.obs_dim <= 4 * MAX_DIM,
            "noise and observation dimensions are limited to {}",
            4 * MAX_DIM
        );
        if let Some(lin) = &self.linear {
            let d = self.dim;
            ensure!(
                lin.drift.shape() == (d, d)
                    && lin.noise_gain.shape() == (d, self.noise_dim)
                    && lin.observation.shape() == (self.obs_dim, d)
                    && lin.prior_mean.len() == d
                    && lin.prior_cov.shape() == (d, d),
                "linear-Gaussian matrices have inconsistent shapes"
            );
        }
        Ok(self.build_unchecked())
    }

    fn build_unchecked(self) -> FilterModel {
        let d = self.dim;
        let p = self.noise_dim;
        let drift = self
            .drift
            .unwrap_or_else(|| Arc::new(|_, out: &mut [f64]| out.fill(0.0)));
        let diffusion = self.diffusion.unwrap_or_else(|| {
            Arc::new(move |_, out: &mut [f64]| {
                out.fill(0.0);
                for i in 0..d.min(p) {
                    out[i * p + i] = 1.0;
                }
            })
        });
        let diffusion_square = self.diffusion_square.unwrap_or_else(|| {
            let g = diffusion.clone();
            Arc::new(move |x: &[f64], out: &mut [f64]| {
                let mut buf = [0.0; MAX_DIM * MAX_DIM * 4];
                let gx = &mut buf[..d * p];
                g(x, gx);
                outer_square(gx, d, p, out);
            })
        });
        let observation = self
            .observation
            .unwrap_or_else(|| Arc::new(|_, out: &mut [f64]| out.fill(0.0)));
        let (initial_density, default_sampler): (ScalarFn, Option<SamplerFn>) =
            match self.initial_density {
                Some(p0) => (p0, None),
                None => (
                    Arc::new(standard_normal_density),
                    Some(Arc::new(standard_normal_sampler)),
                ),
            };
        let sampler = self
            .sampler
            .or(default_sampler)
            .unwrap_or_else(|| rejection_sampler(initial_density.clone(), d));
        FilterModel {
            name: self.name,
            dim: d,
            noise_dim: p,
            obs_dim: self.obs_dim,
            drift,
            diffusion,
            diffusion_square,
            observation,
            initial_density,
            sampler,
            assumptions: self.assumptions,
            linear: self.linear,
            test_functions: self.test_functions,
        }
    }
}

fn standard_normal_density(x: &[f64]) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (-0.5 * r2).exp() / (2.0 * std::f64::consts::PI).powf(x.len() as f64 / 2.0)
}

/// Inverse-CDF draw of a standard normal per coordinate.
fn standard_normal_sampler(rng: &mut dyn RngCore, out: &mut [f64]) {
    let normal = Normal::standard();
    for v in out {
        // open interval (0, 1)
        let u = (rng.random::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
            + 0.5 / (1u64 << 53) as f64;
        *v = normal.inverse_cdf(u);
    }
}

const REJECTION_BOX: f64 = 8.0;
const REJECTION_ATTEMPTS: usize = 1_000_000;

/// Uniform-proposal rejection on `[-8, 8]^d` with an envelope measured on a
/// coarse lattice (padded by 25%).
fn rejection_sampler(density: ScalarFn, d: usize) -> SamplerFn {
    let n = 41usize;
    let h = 2.0 * REJECTION_BOX / (n - 1) as f64;
    let mut peak = 0.0f64;
    let mut x = [0.0; MAX_DIM];
    for idx in 0..n.pow(d as u32) {
        let mut rem = idx;
        for xi in x.iter_mut().take(d) {
            *xi = -REJECTION_BOX + (rem % n) as f64 * h;
            rem /= n;
        }
        peak = peak.max(density(&x[..d]));
    }
    let envelope = 1.25 * peak;
    Arc::new(move |rng: &mut dyn RngCore, out: &mut [f64]| {
        for _ in 0..REJECTION_ATTEMPTS {
            for v in out.iter_mut() {
                *v = rng.random_range(-REJECTION_BOX..REJECTION_BOX);
            }
            if rng.random::<f64>() * envelope <= density(out) {
                return;
            }
        }
        // vanishing density on the proposal box: fall back to the origin
        log::warn!("rejection sampler exhausted after {REJECTION_ATTEMPTS} attempts");
        out.fill(0.0);
    })
}

pub const BUILTIN_MODELS: [&str; 4] = ["linear1d", "linearNd", "benes", "cubic_sensor"];

/// Looks up a registry model. `linearNd` is the two-dimensional instance of
/// [`linear_nd`].
pub fn builtin_model(name: &str) -> Result<FilterModel> {
    match name {
        "linear1d" => linear_nd(1).map(|m| m.rebuild().name("linear1d").build_unchecked()),
        "linearNd" => linear_nd(2),
        "benes" => FilterModel::builder("benes", 1)
            .drift(|x, out| out[0] = x[0].tanh())
            .diffusion(1, |_, out| out[0] = 1.0)
            .diffusion_square(|_, out| out[0] = 1.0)
            .observation(1, |x, out| out[0] = x[0])
            .assumptions(AssumptionProfile::new(1.0, 1.0, 2, 1, 1.0)?)
            .test_function(TestFunction::coordinate(0))
            .test_function(TestFunction::coordinate_squared(0))
            .build(),
        "cubic_sensor" => FilterModel::builder("cubic_sensor", 1)
            .drift(|x, out| out[0] = -x[0])
            .diffusion(1, |_, out| out[0] = 1.0)
            .diffusion_square(|_, out| out[0] = 1.0)
            .observation(1, |x, out| out[0] = x[0] * x[0] * x[0])
            .assumptions(AssumptionProfile::new(1.0, 1.0, 2, 2, 1.0)?)
            .test_function(TestFunction::coordinate(0).with_growth(2, 1.0))
            .build(),
        _ => Err(Error::UnknownModel {
            name: name.into(),
            valid: BUILTIN_MODELS.iter().map(|s| s.to_string()).collect(),
        }),
    }
}

/// `f = -x`, `g = I`, `h = x`, `X_0 ~ N(0, I)` in `d` dimensions.
pub fn linear_nd(d: usize) -> Result<FilterModel> {
    ensure!((1..=MAX_DIM).contains(&d), "dimension {d} unsupported");
    let mut b = FilterModel::builder(format!("linear{d}d"), d)
        .drift(|x, out| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = -v;
            }
        })
        .diffusion(d, move |_, out| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = 1.0;
            }
        })
        .diffusion_square(move |_, out| {
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = 1.0;
            }
        })
        .observation(d, |x, out| out.copy_from_slice(x))
        .assumptions(AssumptionProfile::new(1.0, 1.0, 2, 1, 1.0)?)
        .linear(LinearGaussian {
            drift: -DMatrix::identity(d, d),
            noise_gain: DMatrix::identity(d, d),
            observation: DMatrix::identity(d, d),
            prior_mean: DVector::zeros(d),
            prior_cov: DMatrix::identity(d, d),
        });
    for i in 0..d {
        b = b.test_function(TestFunction::coordinate(i));
    }
    b.test_function(TestFunction::norm_squared()).build()
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthCheck {
    pub label: String,
    /// Largest sampled `|φ(x)| / (L (1 + |x|^{2m}))`.
    pub worst_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub model: String,
    pub radius: f64,
    pub samples: usize,
    pub lipschitz: Check,
    pub ellipticity: Check,
    pub max_asymmetry: f64,
    /// `(2k, ∫|x|^{2k} σ_0)` for `k = 0..=n`.
    pub moments: Vec<(u32, f64)>,
    pub moments_pass: bool,
    pub growth: Vec<GrowthCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.lipschitz.pass
            && self.ellipticity.pass
            && self.max_asymmetry < 1e-12
            && self.moments_pass
            && self.growth.iter().all(|g| g.pass)
    }
}

fn finite_or(coefficient: &'static str, x: &[f64], values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            coefficient,
            point: x.to_vec(),
        })
    }
}

fn sample_ball(rng: &mut impl Rng, radius: f64, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = rng.random_range(-radius..=radius);
        }
        if out.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
            return;
        }
    }
}

fn min_eigenvalue(a: &[f64], d: usize) -> f64 {
    let m = DMatrix::from_row_slice(d, d, a);
    let sym = (&m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Statistical spot-check of the declared assumption constants on the ball
/// of radius `domain_radius`.
pub fn validate_assumptions(
    model: &FilterModel,
    domain_radius: f64,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    ensure!(domain_radius > 0.0, "domain radius must be positive");
    ensure!(samples >= 2, "need at least two samples");
    let d = model.dim();
    let profile = model.assumptions();
    let mut rng = rng::stream(seed, 0);
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut fx = vec![0.0; d];
    let mut fy = vec![0.0; d];
    let mut a = vec![0.0; d * d];

    // A1: half the pairs are far apart, half are local perturbations so the
    // supremum of the derivative is probed as well as global slopes.
    let mut lipschitz = 0.0f64;
    for i in 0..samples {
        sample_ball(&mut rng, domain_radius, &mut x);
        if i % 2 == 0 {
            sample_ball(&mut rng, domain_radius, &mut y);
        } else {
            let eps = 1e-4 * domain_radius;
            for (yi, xi) in y.iter_mut().zip(&x) {
                *yi = xi + rng.random_range(-eps..=eps);
            }
        }
        model.drift(&x, &mut fx);
        finite_or("drift", &x, &fx)?;
        model.drift(&y, &mut fy);
        finite_or("drift", &y, &fy)?;
        let dist = norm_diff(&x, &y);
        if dist > 0.0 {
            lipschitz = lipschitz.max(norm_diff(&fx, &fy) / dist);
        }
    }

    // A2 and symmetry of a.
    let mut min_eig = f64::INFINITY;
    let mut asym = 0.0f64;
    for i in 0..samples {
        if i == 0 {
            x.fill(0.0);
        } else {
            sample_ball(&mut rng, domain_radius, &mut x);
        }
        model.diffusion_square(&x, &mut a);
        finite_or("diffusion_square", &x, &a)?;
        for r in 0..d {
            for c in 0..d {
                asym = asym.max((a[r * d + c] - a[c * d + r]).abs());
            }
        }
        min_eig = min_eig.min(min_eigenvalue(&a, d));
    }

    // A3: tensor trapezoid on [-R, R]^d.
    let per_axis: usize = match d {
        1 => 4001,
        2 => 401,
        _ => 81,
    };
    let h = 2.0 * domain_radius / (per_axis - 1) as f64;
    let n = profile.moment_order as usize;
    let mut moments = vec![0.0; n + 1];
    for idx in 0..per_axis.pow(d as u32) {
        let mut rem = idx;
        let mut w = h.powi(d as i32);
        for xi in x.iter_mut() {
            let j = rem % per_axis;
            rem /= per_axis;
            *xi = -domain_radius + j as f64 * h;
            if j == 0 || j == per_axis - 1 {
                w *= 0.5;
            }
        }
        let p = model.initial_density(&x);
        if !p.is_finite() {
            return Err(Error::NonFinite {
                coefficient: "initial_density",
                point: x.clone(),
            });
        }
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let mut pow = 1.0;
        for m in moments.iter_mut() {
            *m += w * pow * p;
            pow *= r2;
        }
    }
    let moments: Vec<(u32, f64)> = moments
        .into_iter()
        .enumerate()
        .map(|(k, v)| (2 * k as u32, v))
        .collect();
    let moments_pass = moments.iter().all(|(_, v)| v.is_finite());

    // A4 per declared test function.
    let mut growth = Vec::new();
    for tf in model.test_functions() {
        let mut worst = 0.0f64;
        for _ in 0..samples {
            sample_ball(&mut rng, domain_radius, &mut x);
            let v = tf.eval(&x);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    coefficient: "test function",
                    point: x.clone(),
                });
            }
            worst = worst.max(v.abs() / tf.growth_bound(&x));
        }
        growth.push(GrowthCheck {
            label: tf.label().to_string(),
            worst_ratio: worst,
            pass: worst <= 1.0 + 1e-12,
        });
    }

    Ok(ValidationReport {
        model: model.name().to_string(),
        radius: domain_radius,
        samples,
        lipschitz: Check {
            measured: lipschitz,
            bound: profile.lipschitz,
            pass: lipschitz <= profile.lipschitz * 1.01,
        },
        ellipticity: Check {
            measured: min_eig,
            bound: profile.ellipticity,
            pass: min_eig >= profile.ellipticity * 0.99,
        },
        max_asymmetry: asym,
        moments,
        moments_pass,
        growth,
    })
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
