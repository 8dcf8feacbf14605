//! Small statistics helpers shared by the baselines and the sweeps.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// `ln(Σ e^{xᵢ})`, stable for large magnitudes.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(mean e^{xᵢ})`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_se: f64,
    pub slope_se: f64,
    /// Half-width of the 95% Student-t interval for the slope.
    pub slope_ci: f64,
}

/// Ordinary least squares `y = a + b x` with residual-based errors.
/// Needs at least three points.
pub fn ols(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let s2 = rss / (nf - 2.0);
    let slope_se = (s2 / sxx).sqrt();
    let intercept_se = (s2 * (1.0 / nf + mx * mx / sxx)).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(f64::NAN);
    Some(LineFit {
        intercept,
        slope,
        intercept_se,
        slope_se,
        slope_ci: t * slope_se,
    })
}

/// Weighted least squares `y = a + b x` with known per-point standard
/// errors; parameter errors come from the weights alone, so two points
/// suffice. Zero errors are floored relative to the largest one; if every
/// error is zero the points are exact and the fit errors are zero.
pub fn wls_known(x: &[f64], y: &[f64], se: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n || se.len() != n {
        return None;
    }
    let largest = se.iter().copied().fold(0.0, f64::max);
    let exact = largest == 0.0;
    let floor = if exact { 1.0 } else { largest * 1e-9 };
    let w: Vec<f64> = se
        .iter()
        .map(|s| if exact { 1.0 } else { 1.0 / s.max(floor).powi(2) })
        .collect();
    let sw: f64 = w.iter().sum();
    let swx: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
    let swy: f64 = w.iter().zip(y).map(|(a, b)| a * b).sum();
    let swxx: f64 = w.iter().zip(x).map(|(a, b)| a * b * b).sum();
    let swxy: f64 = w.iter().zip(x).zip(y).map(|((a, b), c)| a * b * c).sum();
    let det = sw * swxx - swx * swx;
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let slope = (sw * swxy - swx * swy) / det;
    let intercept = (swxx * swy - swx * swxy) / det;
    let scale = if exact { 0.0 } else { 1.0 };
    let slope_se = scale * (sw / det).sqrt();
    Some(LineFit {
        intercept,
        slope,
        intercept_se: scale * (swxx / det).sqrt(),
        slope_se,
        slope_ci: 1.96 * slope_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_recovers_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 0.5 + 2.0 * v).collect();
        let f = ols(&x, &y).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 0.5).abs() < 1e-12);
        assert!(f.slope_se < 1e-12);
        assert!(ols(&x[..2], &y[..2]).is_none());
    }

    #[test]
    fn wls_two_points() {
        let f = wls_known(&[0.0, 1.0], &[1.0, 3.0], &[0.1, 0.1]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.intercept_se - 0.1).abs() < 1e-12);
        let exact = wls_known(&[0.0, 1.0, 2.0], &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!((exact.intercept, exact.intercept_se), (0.0, 0.0));
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_mean_exp(&[-800.0, -800.0]) + 800.0).abs() < 1e-12);
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
