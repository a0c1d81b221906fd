use crate::error::{config_err, Error, Result};
use crate::rng::{fill_standard_normal, StreamRng};

use super::{ExactSampler, GibbsModel};

/// `π_θ = N(θ, Σ)` with fixed covariance; `U_θ(x) = ½ (x-θ)ᵀ Σ⁻¹ (x-θ)`.
#[derive(Debug, Clone)]
pub struct GaussianLocation {
    theta: Vec<f64>,
    cov: Vec<f64>,
    precision: Vec<f64>,
    chol: Vec<f64>,
    log_det: f64,
}

/// Lower Cholesky factor of a row-major symmetric positive-definite matrix.
pub(crate) fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Inverse of an SPD matrix from its Cholesky factor.
pub(crate) fn spd_inverse(l: &[f64], d: usize) -> Vec<f64> {
    // Solve L Y = I, then Lᵀ X = Y, column by column.
    let mut inv = vec![0.0; d * d];
    let mut y = vec![0.0; d];
    for c in 0..d {
        for i in 0..d {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * d + k] * y[k];
            }
            y[i] = s / l[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in i + 1..d {
                s -= l[k * d + i] * inv[k * d + c];
            }
            inv[i * d + c] = s / l[i * d + i];
        }
    }
    inv
}

impl GaussianLocation {
    pub fn new(theta: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = theta.len();
        if d == 0 {
            return Err(config_err("gaussian location needs at least one dimension"));
        }
        if cov.len() != d * d {
            return Err(Error::Dimension {
                expected: d * d,
                got: cov.len(),
            });
        }
        let chol = cholesky(&cov, d).ok_or_else(|| config_err("covariance is not positive definite"))?;
        let precision = spd_inverse(&chol, d);
        let log_det = 2.0 * (0..d).map(|i| chol[i * d + i].ln()).sum::<f64>();
        Ok(Self {
            theta,
            cov,
            precision,
            chol,
            log_det,
        })
    }

    /// `N(θ, I_d)`.
    pub fn isotropic(theta: Vec<f64>) -> Self {
        let d = theta.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = 1.0;
        }
        Self::new(theta, cov).expect("identity covariance")
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    /// `log Z = (d/2) log 2π + ½ log det Σ`, independent of θ.
    pub fn log_normalizer(&self) -> f64 {
        let d = self.theta.len() as f64;
        0.5 * d * (2.0 * std::f64::consts::PI).ln() + 0.5 * self.log_det
    }

    fn precision_times_residual(&self, x: &[f64], out: &mut [f64]) {
        let d = self.theta.len();
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.precision[i * d + j] * (x[j] - self.theta[j]);
            }
            out[i] = s;
        }
    }
}

impl GibbsModel for GaussianLocation {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn num_params(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.theta.len() {
            return Err(Error::Dimension {
                expected: self.theta.len(),
                got: params.len(),
            });
        }
        self.theta.copy_from_slice(params);
        Ok(())
    }

    fn potential(&self, x: &[f64]) -> f64 {
        let d = self.theta.len();
        let mut s = 0.0;
        for i in 0..d {
            let ri = x[i] - self.theta[i];
            for j in 0..d {
                s += ri * self.precision[i * d + j] * (x[j] - self.theta[j]);
            }
        }
        0.5 * s
    }

    fn potential_and_grad_x(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.precision_times_residual(x, grad);
        0.5 * x
            .iter()
            .zip(&self.theta)
            .zip(grad.iter())
            .map(|((xi, ti), gi)| (xi - ti) * gi)
            .sum::<f64>()
    }

    fn grad_theta(&self, x: &[f64], out: &mut [f64]) {
        self.precision_times_residual(x, out);
        for v in out.iter_mut() {
            *v = -*v;
        }
    }
}

impl ExactSampler for GaussianLocation {
    fn sample_into(&self, rng: &mut StreamRng, out: &mut [f64]) {
        let d = self.theta.len();
        let mut eps = vec![0.0; d];
        fill_standard_normal(rng, &mut eps);
        for i in 0..d {
            let mut s = self.theta[i];
            for k in 0..=i {
                s += self.chol[i * d + k] * eps[k];
            }
            out[i] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::testing::check_gradients;

    #[test]
    fn gradients_match_finite_differences() {
        let m = GaussianLocation::new(vec![0.3, -1.2], vec![1.5, 0.4, 0.4, 0.8]).unwrap();
        check_gradients(&m, &[0.7, 0.1]);
        check_gradients(&GaussianLocation::isotropic(vec![2.0]), &[-0.5]);
    }

    #[test]
    fn inverse_and_log_det() {
        let cov = vec![2.0, 0.5, 0.5, 1.0];
        let m = GaussianLocation::new(vec![0.0, 0.0], cov.clone()).unwrap();
        let p = m.precision();
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| cov[i * 2 + k] * p[k * 2 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let expected = std::f64::consts::TAU.ln() + 0.5 * (2.0f64 - 0.25).ln();
        assert!((m.log_normalizer() - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        assert!(GaussianLocation::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0]).is_err());
    }

    #[test]
    fn exact_samples_have_right_moments() {
        let m = GaussianLocation::new(vec![1.0, -2.0], vec![1.0, 0.6, 0.6, 2.0]).unwrap();
        let streams = crate::rng::RngStreams::new(11);
        let n = 40_000;
        let xs = crate::models::sample_exact(&m, 2, n, &streams, "exact", 0);
        let mean: Vec<f64> = (0..2).map(|j| (0..n).map(|i| xs[2 * i + j]).sum::<f64>() / n as f64).collect();
        let cov01 = (0..n).map(|i| (xs[2 * i] - mean[0]) * (xs[2 * i + 1] - mean[1])).sum::<f64>() / n as f64;
        assert!((mean[0] - 1.0).abs() < 0.03 && (mean[1] + 2.0).abs() < 0.04);
        assert!((cov01 - 0.6).abs() < 0.05);
    }
}
