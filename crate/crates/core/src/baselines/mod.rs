//! Reference estimators: exact Kalman for the linear models, weighted
//! Monte Carlo under the reference measure, a bootstrap particle filter and
//! a refined run of the grid filter itself.

mod kalman;
mod oracle;
mod particle;

pub use kalman::{discretize, kalman_filter, GaussHermite, KalmanOutput};
pub use oracle::fine_oracle;
pub use particle::{
    bootstrap_pf, ess, ks_monte_carlo, systematic_resample, MonteCarloOutput, StdErr,
    WeightedEnsemble, DEGENERACY_ESS,
};
