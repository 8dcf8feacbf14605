//! Continuous-discrete Kalman filter for the linear-Gaussian registry
//! models.
//!
//! Prediction is exact over `δ`: `Φ = e^{Fδ}` and the process covariance
//! `Q = ∫₀^δ e^{Fs} ΓΓᵀ e^{Fᵀs} ds` both come from one block matrix
//! exponential (Van Loan). The increment `ΔY_k` is treated as a discrete
//! measurement of `H X δ` with noise covariance `δ I`.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure, Error, Result};
use crate::model::{FilterModel, TestFunction, TimeSchedule};
use crate::sde::ObservationPath;

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanOutput {
    pub schedule: TimeSchedule,
    /// Posterior means at `τ_0..τ_K` (prior at `τ_0`).
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl KalmanOutput {
    /// `E[φ(X)]` under each Gaussian posterior.
    pub fn expectations(&self, phi: &TestFunction) -> Vec<f64> {
        let rule = GaussHermite::new(20);
        self.means
            .iter()
            .zip(&self.covariances)
            .map(|(m, p)| rule.expectation(phi, m, p))
            .collect()
    }
}

/// `(Φ, Q)` for the linear SDE over one step of length `delta`.
pub fn discretize(drift: &DMatrix<f64>, noise_gain: &DMatrix<f64>, delta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = drift.nrows();
    let mut block = DMatrix::zeros(2 * d, 2 * d);
    block.view_mut((0, 0), (d, d)).copy_from(&(-drift * delta));
    block
        .view_mut((0, d), (d, d))
        .copy_from(&(noise_gain * noise_gain.transpose() * delta));
    block.view_mut((d, d), (d, d)).copy_from(&(drift.transpose() * delta));
    let e = block.exp();
    let phi = e.view((d, d), (d, d)).transpose();
    let q = &phi * e.view((0, d), (d, d));
    let q = (&q + q.transpose()) * 0.5;
    (phi, q)
}

pub fn kalman_filter(model: &FilterModel, schedule: &TimeSchedule, obs: &ObservationPath) -> Result<KalmanOutput> {
    let lin = model
        .linear()
        .ok_or_else(|| Error::NotLinear(model.name().to_string()))?;
    ensure!(
        obs.schedule() == schedule,
        "observation path is not on the requested schedule"
    );
    let d = model.dim();
    let m = model.obs_dim();
    let delta = schedule.delta();
    let (phi, q) = discretize(&lin.drift, &lin.noise_gain, delta);
    let h = &lin.observation * delta;
    let r = DMatrix::<f64>::identity(m, m) * delta;
    let eye = DMatrix::<f64>::identity(d, d);

    let mut mean = lin.prior_mean.clone();
    let mut cov = lin.prior_cov.clone();
    let mut means = vec![mean.clone()];
    let mut covariances = vec![cov.clone()];
    let mut dy = vec![0.0; m];
    for k in 1..=schedule.steps() {
        mean = &phi * &mean;
        cov = &phi * &cov * phi.transpose() + &q;

        obs.increment_into(k, &mut dy);
        let innovation = DVector::from_column_slice(&dy) - &h * &mean;
        let s = &h * &cov * h.transpose() + &r;
        let s_inv = s
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("innovation covariance not positive definite".into()))?
            .inverse();
        let gain = &cov * h.transpose() * s_inv;
        mean += &gain * innovation;
        // Joseph form keeps the update symmetric positive definite
        let ikh = &eye - &gain * &h;
        cov = &ikh * &cov * ikh.transpose() + &gain * &r * gain.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
        means.push(mean.clone());
        covariances.push(cov.clone());
    }
    Ok(KalmanOutput {
        schedule: *schedule,
        means,
        covariances,
    })
}

/// Tensor Gauss–Hermite rule for Gaussian expectations (nodes from the
/// Golub–Welsch eigenproblem).
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(order: usize) -> Self {
        // probabilists' Hermite: off-diagonal sqrt(k)
        let mut j = DMatrix::<f64>::zeros(order, order);
        for k in 1..order {
            let b = (k as f64).sqrt();
            j[(k, k - 1)] = b;
            j[(k - 1, k)] = b;
        }
        let eig = j.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..order)
            .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn expectation(&self, phi: &TestFunction, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let d = mean.len();
        let l = match cov.clone().cholesky() {
            Some(c) => c.l(),
            None => DMatrix::zeros(d, d),
        };
        let n = self.nodes.len();
        let mut z = DVector::zeros(d);
        let mut acc = 0.0;
        for flat in 0..n.pow(d as u32) {
            let mut rem = flat;
            let mut w = 1.0;
            for a in 0..d {
                let i = rem % n;
                rem /= n;
                z[a] = self.nodes[i];
                w *= self.weights[i];
            }
            let x = mean + &l * &z;
            acc += w * phi.eval(x.as_slice());
        }
        acc
    }
}
