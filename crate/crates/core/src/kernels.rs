//! Unadjusted Langevin (ULA) forward kernel, its ULA-reversal backward
//! kernel, and the incremental importance weight.
//!
//! The forward kernel is `x' = x - γ ∇U_{θ_{k-1}}(x) + √(2γ) σ ξ` and the
//! backward kernel is the same move under `θ_k`, evaluated from `x'` back to
//! `x`. Both are Gaussian with variance `2γσ²`, so their density ratio reduces
//! to the compact `α` form used throughout the samplers.

use crate::error::{config_err, Error, Result};
use crate::models::GibbsModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UlaKernel {
    pub gamma: f64,
    pub sigma_noise: f64,
}

impl UlaKernel {
    pub fn new(gamma: f64, sigma_noise: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(config_err(format!("ULA step size must be positive, got {gamma}")));
        }
        if !(sigma_noise > 0.0 && sigma_noise.is_finite()) {
            return Err(config_err(format!("ULA noise scale must be positive, got {sigma_noise}")));
        }
        Ok(Self { gamma, sigma_noise })
    }

    /// Standard deviation of the Gaussian increment, `√(2γ) σ`.
    pub fn noise_scale(&self) -> f64 {
        (2.0 * self.gamma).sqrt() * self.sigma_noise
    }
}

/// One ULA move written into `out`: `x - γ ∇U(x) + √(2γ) σ ξ`.
pub fn ula_step(x: &[f64], grad_x_u: &[f64], kernel: &UlaKernel, noise: &[f64], out: &mut [f64]) {
    let s = kernel.noise_scale();
    for (((o, xi), gi), ni) in out.iter_mut().zip(x).zip(grad_x_u).zip(noise) {
        *o = xi - kernel.gamma * gi + s * ni;
    }
}

/// `α_θ(x → x'; σ)` from a precomputed `U_θ(x)` and `∇_x U_θ(x)`.
pub fn alpha_from(u: f64, grad: &[f64], x: &[f64], x_prime: &[f64], gamma: f64, sigma_noise: f64) -> f64 {
    let s2 = sigma_noise * sigma_noise;
    let mut cross = 0.0;
    let mut norm2 = 0.0;
    for ((g, a), b) in grad.iter().zip(x).zip(x_prime) {
        cross += (b - a) * g;
        norm2 += g * g;
    }
    u + cross / (2.0 * s2) + gamma * norm2 / (4.0 * s2)
}

/// `α_θ(x → x'; σ) = U_θ(x) + (x'-x)ᵀ∇U_θ(x) / (2σ²) + γ‖∇U_θ(x)‖² / (4σ²)`.
pub fn alpha<M: GibbsModel + ?Sized>(model: &M, x: &[f64], x_prime: &[f64], gamma: f64, sigma_noise: f64) -> f64 {
    let mut grad = vec![0.0; x.len()];
    let u = model.potential_and_grad_x(x, &mut grad);
    alpha_from(u, &grad, x, x_prime, gamma, sigma_noise)
}

/// Potential and spatial gradient of one particle under one parameter value.
#[derive(Debug, Clone, Copy)]
pub struct PointEval<'a> {
    pub u: f64,
    pub grad: &'a [f64],
}

/// Compact log incremental weight from cached evaluations:
/// `-α_{θ_k}(x_k → x_{k-1}) + α_{θ_{k-1}}(x_{k-1} → x_k)`.
pub fn log_weight_from(prev: PointEval<'_>, curr: PointEval<'_>, x_prev: &[f64], x_curr: &[f64], kernel: &UlaKernel) -> f64 {
    -alpha_from(curr.u, curr.grad, x_curr, x_prev, kernel.gamma, kernel.sigma_noise)
        + alpha_from(prev.u, prev.grad, x_prev, x_curr, kernel.gamma, kernel.sigma_noise)
}

/// Compact-form log incremental weight of the move `x_prev → x_curr`.
pub fn incremental_log_weight<M: GibbsModel + ?Sized>(
    model_prev: &M,
    model_curr: &M,
    x_prev: &[f64],
    x_curr: &[f64],
    kernel: &UlaKernel,
) -> Result<f64> {
    let lw = -alpha(model_curr, x_curr, x_prev, kernel.gamma, kernel.sigma_noise)
        + alpha(model_prev, x_prev, x_curr, kernel.gamma, kernel.sigma_noise);
    finite_weight(lw)
}

fn gaussian_log_density(y: &[f64], mean_base: &[f64], grad: &[f64], gamma: f64, var: f64) -> f64 {
    let d = y.len() as f64;
    let sq: f64 = y
        .iter()
        .zip(mean_base)
        .zip(grad)
        .map(|((yi, xi), gi)| {
            let r = yi - (xi - gamma * gi);
            r * r
        })
        .sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var)
}

/// Direct log ratio `log [Π_{θ_k}(x_k) L(x_k → x_{k-1})] - log [Π_{θ_{k-1}}(x_{k-1}) K(x_{k-1} → x_k)]`
/// with both Gaussian kernels of variance `2γσ²`. Agrees with
/// [`incremental_log_weight`] up to rounding.
pub fn incremental_log_weight_direct<M: GibbsModel + ?Sized>(
    model_prev: &M,
    model_curr: &M,
    x_prev: &[f64],
    x_curr: &[f64],
    kernel: &UlaKernel,
) -> Result<f64> {
    let d = x_prev.len();
    let mut g_prev = vec![0.0; d];
    let mut g_curr = vec![0.0; d];
    let u_prev = model_prev.potential_and_grad_x(x_prev, &mut g_prev);
    let u_curr = model_curr.potential_and_grad_x(x_curr, &mut g_curr);
    let var = 2.0 * kernel.gamma * kernel.sigma_noise * kernel.sigma_noise;
    let log_backward = gaussian_log_density(x_prev, x_curr, &g_curr, kernel.gamma, var);
    let log_forward = gaussian_log_density(x_curr, x_prev, &g_prev, kernel.gamma, var);
    finite_weight(-u_curr + log_backward + u_prev - log_forward)
}

fn finite_weight(lw: f64) -> Result<f64> {
    if lw.is_finite() {
        Ok(lw)
    } else {
        Err(Error::NonFinite {
            what: "incremental log-weight",
            index: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::GaussianLocation;
    use proptest::prelude::*;

    /// `U(x) = x²` in one dimension.
    #[derive(Clone)]
    struct Square;

    impl GibbsModel for Square {
        fn dim(&self) -> usize {
            1
        }
        fn num_params(&self) -> usize {
            0
        }
        fn params(&self) -> &[f64] {
            &[]
        }
        fn set_params(&mut self, _: &[f64]) -> Result<()> {
            Ok(())
        }
        fn potential(&self, x: &[f64]) -> f64 {
            x[0] * x[0]
        }
        fn potential_and_grad_x(&self, x: &[f64], g: &mut [f64]) -> f64 {
            g[0] = 2.0 * x[0];
            x[0] * x[0]
        }
        fn grad_theta(&self, _: &[f64], _: &mut [f64]) {}
    }

    #[test]
    fn ula_step_examples() {
        let k = UlaKernel::new(0.1, 1.0).unwrap();
        let mut out = [9.0];
        ula_step(&[0.0], &[0.0], &k, &[0.0], &mut out);
        assert_eq!(out[0], 0.0);
        let mut g = [0.0];
        Square.potential_and_grad_x(&[0.0], &mut g);
        ula_step(&[0.0], &g, &k, &[1.0], &mut out);
        assert!((out[0] - 0.2f64.sqrt()).abs() < 1e-15);
        let tiny = UlaKernel::new(1e-300, 1.0).unwrap();
        ula_step(&[3.5], &[2.0], &tiny, &[0.0], &mut out);
        assert_eq!(out[0], 3.5);
    }

    #[test]
    fn kernel_rejects_bad_parameters() {
        assert!(UlaKernel::new(0.0, 1.0).is_err());
        assert!(UlaKernel::new(0.1, -1.0).is_err());
        assert!(UlaKernel::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn alpha_examples() {
        let m = GaussianLocation::isotropic(vec![0.0]);
        assert!((alpha(&m, &[1.0], &[0.0], 0.1, 1.0) - 0.025).abs() < 1e-15);
        assert!((alpha(&m, &[2.0], &[2.0], 0.1, 1.0) - 2.1).abs() < 1e-15);
        assert!((alpha(&m, &[0.0], &[7.0], 0.1, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn identical_states_and_parameters_give_zero_weight() {
        let m = GaussianLocation::isotropic(vec![0.4, -0.2]);
        let k = UlaKernel::new(0.05, 1.0).unwrap();
        let lw = incremental_log_weight(&m, &m, &[0.3, 1.0], &[0.3, 1.0], &k).unwrap();
        assert!(lw.abs() < 1e-15);
    }

    #[test]
    fn dual_formula_on_shifted_gaussian() {
        let prev = GaussianLocation::isotropic(vec![0.0]);
        let curr = GaussianLocation::isotropic(vec![1.0]);
        let k = UlaKernel::new(0.1, 1.0).unwrap();
        let a = incremental_log_weight(&prev, &curr, &[0.0], &[1.0], &k).unwrap();
        let b = incremental_log_weight_direct(&prev, &curr, &[0.0], &[1.0], &k).unwrap();
        // -α_1(1 → 0) + α_0(0 → 1) with ∇U_1(1) = 0 and ∇U_0(0) = 0.
        assert!((a - 0.0).abs() < 1e-12);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn weight_shrinks_with_step_size() {
        let m = GaussianLocation::isotropic(vec![0.0]);
        let x = [1.3];
        let mut last = f64::INFINITY;
        for gamma in [1e-1, 1e-2, 1e-3] {
            let k = UlaKernel::new(gamma, 1.0).unwrap();
            let mut g = [0.0];
            m.potential_and_grad_x(&x, &mut g);
            let mut y = [0.0];
            ula_step(&x, &g, &k, &[0.7], &mut y);
            let lw = incremental_log_weight(&m, &m, &x, &y, &k).unwrap().abs();
            assert!(lw < last, "gamma {gamma}: {lw} !< {last}");
            last = lw;
        }
    }

    proptest! {
        #[test]
        fn compact_and_direct_forms_agree(
            tp in prop::collection::vec(-2.0f64..2.0, 2),
            tc in prop::collection::vec(-2.0f64..2.0, 2),
            xp in prop::collection::vec(-3.0f64..3.0, 2),
            xc in prop::collection::vec(-3.0f64..3.0, 2),
            log_gamma in -4.0f64..-1.0,
            sigma in 0.3f64..2.0,
        ) {
            let cov = vec![1.3, 0.2, 0.2, 0.7];
            let prev = GaussianLocation::new(tp, cov.clone()).unwrap();
            let curr = GaussianLocation::new(tc, cov).unwrap();
            let k = UlaKernel::new(10f64.powf(log_gamma), sigma).unwrap();
            let a = incremental_log_weight(&prev, &curr, &xp, &xc, &k).unwrap();
            let b = incremental_log_weight_direct(&prev, &curr, &xp, &xc, &k).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
    }
}
