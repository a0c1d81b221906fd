//! Closed-form oracles and evaluation tools: Gaussian ESS and χ², grid
//! quadrature of partition functions and KL, the tilted optimum of indicator
//! rewards, fresh-reward chains and the idealised gradient-descent rate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::kernels::{ula_step, UlaKernel};
use crate::models::{self, GaussianLocation, GibbsModel};
use crate::par;
use crate::pretrain::clamped_ula_step;
use crate::rewards::Reward;
use crate::rng::{fill_standard_normal, RngStreams};

/// `xᵀ A x` for a row-major symmetric `A`.
fn quad_form(x: &[f64], a: &[f64]) -> f64 {
    let d = x.len();
    (0..d)
        .map(|i| x[i] * (0..d).map(|j| a[i * d + j] * x[j]).sum::<f64>())
        .sum()
}

/// `N exp(-γ² gᵀ Σ⁻¹ g)`: the large-N ESS after one exact reweighting between
/// Gaussian location targets shifted by `γ g`.
pub fn ess_infinity_gaussian(n: f64, gamma: f64, grad_l: &[f64], sigma_inv: &[f64]) -> f64 {
    n * (-gamma * gamma * quad_form(grad_l, sigma_inv)).exp()
}

/// `χ²(N(μ + δ, Σ) ‖ N(μ, Σ)) = exp(δᵀ Σ⁻¹ δ) - 1`.
pub fn chi2_gaussian_shift(delta: &[f64], sigma_inv: &[f64]) -> f64 {
    quad_form(delta, sigma_inv).exp_m1()
}

/// Uniform midpoint grid on an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Points per dimension.
    pub points: usize,
}

impl QuadratureGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: usize) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(config_err("grid bounds must have equal, non-zero length"));
        }
        if points == 0 || lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(config_err("grid needs points > 0 and lower < upper"));
        }
        Ok(Self { lower, upper, points })
    }

    /// `[lo, hi]^dim` with `points` per side.
    pub fn cube(dim: usize, lo: f64, hi: f64, points: usize) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim], points)
    }

    /// Default grid for 2-d energies: 256 × 256 on `[-6, 6]²`.
    pub fn default_2d() -> Self {
        Self::cube(2, -6.0, 6.0, 256).expect("valid grid")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.points as f64
    }

    /// Cell measure `Δᵈ`.
    pub fn cell_measure(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    /// Row-major cell centres, first axis slowest.
    pub fn nodes(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; self.len() * d];
        par::for_each_row_mut(&mut out, d, |g, row| {
            let mut rem = g;
            for axis in (0..d).rev() {
                let i = rem % self.points;
                rem /= self.points;
                row[axis] = self.lower[axis] + (i as f64 + 0.5) * self.spacing(axis);
            }
        });
        out
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + par::sum(values.len(), |i| (values[i] - max).exp()).ln()
}

/// Normalised log-density of `model` at every grid node.
pub fn quadrature_log_density<M: GibbsModel + ?Sized>(model: &M, grid: &QuadratureGrid) -> Result<Vec<f64>> {
    check_grid(model, grid)?;
    let u = models::potentials(model, &grid.nodes())?;
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    let log_z = log_sum_exp(&neg) + grid.cell_measure().ln();
    Ok(neg.iter().map(|v| v - log_z).collect())
}

fn check_grid<M: GibbsModel + ?Sized>(model: &M, grid: &QuadratureGrid) -> Result<()> {
    if model.dim() != grid.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: grid.dim(),
        });
    }
    Ok(())
}

/// `log Σ_g Δᵈ exp(-U(x_g))` over the grid.
pub fn quadrature_log_z<M: GibbsModel + ?Sized>(model: &M, grid: &QuadratureGrid) -> Result<f64> {
    check_grid(model, grid)?;
    let u = models::potentials(model, &grid.nodes())?;
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    Ok(log_sum_exp(&neg) + grid.cell_measure().ln())
}

/// `KL(p ‖ q) ≈ Σ_g p(x_g) (log p - log q) Δᵈ` with both densities normalised on the grid.
pub fn kl_quadrature<P, Q>(p: &P, q: &Q, grid: &QuadratureGrid) -> Result<f64>
where
    P: GibbsModel + ?Sized,
    Q: GibbsModel + ?Sized,
{
    let lp = quadrature_log_density(p, grid)?;
    let lq = quadrature_log_density(q, grid)?;
    let cell = grid.cell_measure();
    Ok(par::sum(lp.len(), |g| lp[g].exp() * (lp[g] - lq[g])) * cell)
}

/// `E_π[f]` by grid quadrature.
pub fn quadrature_expectation<M, F>(model: &M, grid: &QuadratureGrid, f: F) -> Result<f64>
where
    M: GibbsModel + ?Sized,
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let lp = quadrature_log_density(model, grid)?;
    let nodes = grid.nodes();
    let d = grid.dim();
    let cell = grid.cell_measure();
    Ok(par::sum(lp.len(), |g| lp[g].exp() * f(&nodes[g * d..(g + 1) * d])) * cell)
}

/// Reward expectation under `model` by quadrature; `π(H)` for indicator rewards.
pub fn quadrature_reward<M: GibbsModel + ?Sized>(model: &M, reward: &Reward, grid: &QuadratureGrid) -> Result<f64> {
    reward.check_dim(model.dim())?;
    quadrature_expectation(model, grid, |x| reward.evaluate(x))
}

/// Mass on `H` of the reverse-KL optimum `π* ∝ π₀ e^{R/β}` for `R = 1_H`:
/// `e^{1/β} π₀(H) / (e^{1/β} π₀(H) + 1 - π₀(H))`.
pub fn tilted_optimum(pi0_mass: f64, beta_kl: f64) -> f64 {
    if pi0_mass <= 0.0 {
        return 0.0;
    }
    if pi0_mass >= 1.0 {
        return 1.0;
    }
    let t = 1.0 / beta_kl + pi0_mass.ln() - (1.0 - pi0_mass).ln();
    1.0 / (1.0 + (-t).exp())
}

/// Exact χ² of a Gaussian location step and its Fisher-quadratic approximation.
///
/// The Fisher information `E[∇_θU ∇_θUᵀ]` is computed by quadrature on a box
/// of ±10 standard deviations, so the model must have dimension 1 or 2.
pub fn chi2_small_gamma_check(model: &GaussianLocation, gamma: f64, grad_l: &[f64]) -> Result<(f64, f64)> {
    let d = model.dim();
    if grad_l.len() != d {
        return Err(Error::Dimension {
            expected: d,
            got: grad_l.len(),
        });
    }
    if d > 2 {
        return Err(config_err("Fisher quadrature supports dimension 1 or 2"));
    }
    let delta: Vec<f64> = grad_l.iter().map(|g| gamma * g).collect();
    let exact = chi2_gaussian_shift(&delta, model.precision());
    let theta = model.params();
    let cov = model.covariance();
    let lower: Vec<f64> = (0..d).map(|i| theta[i] - 10.0 * cov[i * d + i].sqrt()).collect();
    let upper: Vec<f64> = (0..d).map(|i| theta[i] + 10.0 * cov[i * d + i].sqrt()).collect();
    let grid = QuadratureGrid::new(lower, upper, if d == 1 { 4096 } else { 512 })?;
    let lp = quadrature_log_density(model, &grid)?;
    let nodes = grid.nodes();
    let cell = grid.cell_measure();
    let fisher = par::sum_vec(lp.len(), d * d, |g, acc| {
        let mut s = vec![0.0; d];
        model.grad_theta(&nodes[g * d..(g + 1) * d], &mut s);
        let w = lp[g].exp() * cell;
        for i in 0..d {
            for j in 0..d {
                acc[i * d + j] += w * s[i] * s[j];
            }
        }
    });
    Ok((exact, gamma * gamma * quad_form(grad_l, &fisher)))
}

/// Long-chain evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreshEvalConfig {
    pub chains: usize,
    pub burn_in: usize,
    pub steps: usize,
    pub gamma: f64,
    #[serde(default = "unit")]
    pub sigma_noise: f64,
    /// Box for the uniform initialisation (and clamping, when enabled).
    pub lower: f64,
    pub upper: f64,
    /// Clamp every state to the box, as in pretraining.
    #[serde(default)]
    pub clamp: bool,
}

fn unit() -> f64 {
    1.0
}

impl FreshEvalConfig {
    /// Reduced chain counts suitable for desk runs.
    pub fn desk() -> Self {
        Self {
            chains: 50,
            burn_in: 2000,
            steps: 2000,
            gamma: 5e-3,
            sigma_noise: 1.0,
            lower: -6.0,
            upper: 6.0,
            clamp: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            chains: 1000,
            burn_in: 15_000,
            steps: 5000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.steps == 0 {
            return Err(config_err("fresh evaluation needs at least one chain and one step"));
        }
        if !(self.lower < self.upper) {
            return Err(config_err("evaluation box needs lower < upper"));
        }
        if self.clamp && self.sigma_noise != 1.0 {
            return Err(config_err("clamped evaluation chains use unit noise"));
        }
        UlaKernel::new(self.gamma, self.sigma_noise).map(|_| ())
    }
}

/// Runs independent ULA chains under a frozen model from uniform noise on the
/// box; `visit(chain, state)` sees states `X_B, …, X_{B+T-1}` and the terminal
/// state of each chain is returned.
fn run_eval_chains<M, V, S>(model: &M, cfg: &FreshEvalConfig, streams: &RngStreams, visit: V) -> Result<(Vec<f64>, Vec<S>)>
where
    M: GibbsModel + ?Sized,
    S: Default + Send,
    V: Fn(&[f64], &mut S) + Sync + Send,
{
    cfg.validate()?;
    let d = model.dim();
    let kernel = UlaKernel::new(cfg.gamma, cfg.sigma_noise)?;
    let results = par::map_indexed(cfg.chains, |c| -> Result<(Vec<f64>, S)> {
        let mut init_rng = streams.lane("eval_init", 0, c as u64);
        let mut rng = streams.lane("eval_chains", 0, c as u64);
        let mut x: Vec<f64> = (0..d).map(|_| init_rng.random_range(cfg.lower..=cfg.upper)).collect();
        let mut g = vec![0.0; d];
        let mut noise = vec![0.0; d];
        let mut next = vec![0.0; d];
        let mut acc = S::default();
        for t in 0..cfg.burn_in + cfg.steps {
            if t >= cfg.burn_in {
                visit(&x, &mut acc);
            }
            if t + 1 == cfg.burn_in + cfg.steps {
                break;
            }
            model.potential_and_grad_x(&x, &mut g);
            fill_standard_normal(&mut rng, &mut noise);
            if cfg.clamp {
                clamped_ula_step(&x, &g, cfg.gamma, cfg.lower, cfg.upper, &noise, &mut next);
            } else {
                ula_step(&x, &g, &kernel, &noise, &mut next);
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { chain: c, step: t + 1 });
            }
            std::mem::swap(&mut x, &mut next);
        }
        Ok((x, acc))
    });
    let mut terminals = Vec::with_capacity(cfg.chains * d);
    let mut accs = Vec::with_capacity(cfg.chains);
    for r in results {
        let (x, a) = r?;
        terminals.extend_from_slice(&x);
        accs.push(a);
    }
    Ok((terminals, accs))
}

/// Neumaier-compensated running sum, so long averages of a constant are exact.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Time-and-chain average of `R` along long ULA chains under a frozen model.
pub fn fresh_reward<M: GibbsModel + ?Sized>(model: &M, reward: &Reward, cfg: &FreshEvalConfig, seed: u64) -> Result<f64> {
    reward.check_dim(model.dim())?;
    let streams = RngStreams::new(seed);
    let (_, sums) = run_eval_chains(model, cfg, &streams, |x, acc: &mut CompensatedSum| acc.add(reward.evaluate(x)))?;
    let mut total = CompensatedSum::default();
    for s in &sums {
        total.add(s.value());
    }
    Ok(total.value() / (cfg.chains * cfg.steps) as f64)
}

/// Terminal states of `cfg.chains` long chains; used to draw approximate
/// samples of an energy without an exact sampler.
pub fn langevin_samples<M: GibbsModel + ?Sized>(model: &M, cfg: &FreshEvalConfig, seed: u64) -> Result<Vec<f64>> {
    let streams = RngStreams::new(seed);
    Ok(run_eval_chains(model, cfg, &streams, |_, _: &mut ()| {})?.0)
}

/// Gaps `ℓ(θ_k) - inf ℓ`, `k = 0..=k_steps`, of exact gradient descent on
/// `ℓ(θ) = ½ μ θ²`.
pub fn idealized_gd_check(mu: f64, l_smooth: f64, gamma: f64, k_steps: usize, theta0: f64) -> Result<Vec<f64>> {
    if !(mu > 0.0 && l_smooth >= mu) {
        return Err(config_err("need 0 < μ ≤ L"));
    }
    if !(gamma > 0.0 && gamma <= 1.0 / l_smooth) {
        return Err(config_err(format!("step size {gamma} exceeds 1/L = {}", 1.0 / l_smooth)));
    }
    let mut theta = theta0;
    let mut gaps = Vec::with_capacity(k_steps + 1);
    gaps.push(0.5 * mu * theta * theta);
    for _ in 0..k_steps {
        theta -= gamma * mu * theta;
        gaps.push(0.5 * mu * theta * theta);
    }
    Ok(gaps)
}

/// The PL rate bound `(1 - γμ)^k gap₀`.
pub fn pl_bound(mu: f64, gamma: f64, k: usize, gap0: f64) -> f64 {
    (1.0 - gamma * mu).powi(k as i32) * gap0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::HalfPlane;

    #[test]
    fn ess_infinity_examples() {
        let eye = [1.0];
        assert_eq!(ess_infinity_gaussian(1000.0, 0.0, &[3.0], &eye), 1000.0);
        assert_eq!(ess_infinity_gaussian(1000.0, 0.5, &[0.0], &eye), 1000.0);
        let v = ess_infinity_gaussian(1000.0, 0.1, &[2.0], &eye);
        assert!((v - 960.789_439_152_323_2).abs() < 1e-9, "{v}");
    }

    #[test]
    fn chi2_examples_and_ess_identity() {
        let eye2 = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(chi2_gaussian_shift(&[0.0, 0.0], &eye2), 0.0);
        assert!((chi2_gaussian_shift(&[1.0, 0.0], &eye2) - (std::f64::consts::E - 1.0)).abs() < 1e-12);
        let p = [2.0, 0.3, 0.3, 0.5];
        let g = [0.7, -1.2];
        let gamma = 0.15;
        let delta = [gamma * g[0], gamma * g[1]];
        let lhs = 1000.0 / (1.0 + chi2_gaussian_shift(&delta, &p));
        assert!((lhs - ess_infinity_gaussian(1000.0, gamma, &g, &p)).abs() < 1e-10);
    }

    #[test]
    fn chi2_closed_form_matches_numerical_integration() {
        // 1-d: ∫ p₁² / p₀ - 1 with p₀ = N(0, s²), p₁ = N(δ, s²).
        let (s, delta) = (1.3f64, 0.8f64);
        let grid = QuadratureGrid::cube(1, -30.0, 30.0, 200_000).unwrap();
        let h = grid.cell_measure();
        let norm = |x: f64, m: f64| (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let integral: f64 = grid.nodes().iter().map(|&x| norm(x, delta).powi(2) / norm(x, 0.0) * h).sum();
        let closed = chi2_gaussian_shift(&[delta], &[1.0 / (s * s)]);
        assert!((integral - 1.0 - closed).abs() < 1e-6, "{integral} vs {closed}");
    }

    #[test]
    fn chi2_small_gamma_examples() {
        let m = GaussianLocation::isotropic(vec![0.3]);
        assert_eq!(chi2_small_gamma_check(&m, 0.0, &[1.0]).unwrap(), (0.0, 0.0));
        let (exact, approx) = chi2_small_gamma_check(&m, 0.1, &[1.0]).unwrap();
        assert!((exact / approx - 0.01f64.exp_m1() / 0.01).abs() < 1e-6);
        let (_, half) = chi2_small_gamma_check(&m, 0.05, &[1.0]).unwrap();
        assert!((approx / half - 4.0).abs() < 1e-9);
    }

    #[test]
    fn log_z_examples() {
        let g = GaussianLocation::isotropic(vec![0.0]);
        let grid = QuadratureGrid::cube(1, -8.0, 8.0, 4096).unwrap();
        let lz = quadrature_log_z(&g, &grid).unwrap();
        assert!((lz - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-4);
        let fine = QuadratureGrid::cube(1, -8.0, 8.0, 8192).unwrap();
        assert!((quadrature_log_z(&g, &fine).unwrap() - lz).abs() < 1e-6);

        struct Flat;
        impl GibbsModel for Flat {
            fn dim(&self) -> usize {
                2
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
            fn potential(&self, _: &[f64]) -> f64 {
                1.5
            }
            fn potential_and_grad_x(&self, _: &[f64], g: &mut [f64]) -> f64 {
                g.fill(0.0);
                1.5
            }
            fn grad_theta(&self, _: &[f64], _: &mut [f64]) {}
        }
        let box2 = QuadratureGrid::new(vec![-1.0, 0.0], vec![2.0, 4.0], 16).unwrap();
        assert!((quadrature_log_z(&Flat, &box2).unwrap() - (12.0f64.ln() - 1.5)).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let grid = QuadratureGrid::cube(1, -10.0, 10.0, 4096).unwrap();
        let p = GaussianLocation::isotropic(vec![0.0]);
        let q = GaussianLocation::isotropic(vec![1.0]);
        assert!(kl_quadrature(&p, &p, &grid).unwrap().abs() < 1e-10);
        assert!((kl_quadrature(&p, &q, &grid).unwrap() - 0.5).abs() < 1e-4);
    }

    #[test]
    fn tilted_optimum_examples() {
        let e = std::f64::consts::E;
        assert!((tilted_optimum(0.5, 1.0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((tilted_optimum(0.3, 1e9) - 0.3).abs() < 1e-8);
        assert_eq!(tilted_optimum(0.0, 0.1), 0.0);
        assert!(tilted_optimum(0.2, 1e-3) <= 1.0);
    }

    #[test]
    fn tilted_optimum_is_monotone() {
        let masses: Vec<f64> = (1..=20).map(|i| i as f64 / 21.0).collect();
        let betas: Vec<f64> = (1..=20).map(|i| 0.1 * i as f64).collect();
        for &m in &masses {
            for w in betas.windows(2) {
                assert!(tilted_optimum(m, w[1]) < tilted_optimum(m, w[0]));
            }
        }
        for &b in &betas {
            for w in masses.windows(2) {
                assert!(tilted_optimum(w[1], b) > tilted_optimum(w[0], b));
            }
        }
    }

    #[test]
    fn fresh_reward_examples() {
        let g = GaussianLocation::isotropic(vec![0.0]);
        let left = Reward::HalfPlane { side: HalfPlane::Left };
        let cfg = FreshEvalConfig {
            chains: 50,
            burn_in: 2000,
            steps: 2000,
            gamma: 0.05,
            sigma_noise: 1.0,
            lower: -3.0,
            upper: 3.0,
            clamp: false,
        };
        let r = fresh_reward(&g, &left, &cfg, 1).unwrap();
        assert!((r - 0.5).abs() < 0.02, "{r}");

        let constant = Reward::Constant { value: 0.7 };
        assert_eq!(fresh_reward(&g, &constant, &cfg, 1).unwrap(), 0.7);

        let one = FreshEvalConfig {
            chains: 1,
            burn_in: 0,
            steps: 1,
            ..cfg.clone()
        };
        let x0 = langevin_samples(&g, &one, 9).unwrap()[0];
        let expected = if x0 < 0.0 { 1.0 } else { 0.0 };
        assert_eq!(fresh_reward(&g, &left, &one, 9).unwrap(), expected);
    }

    #[test]
    fn idealized_gd_examples() {
        assert_eq!(idealized_gd_check(1.0, 1.0, 1.0, 3, 5.0).unwrap()[1..], [0.0, 0.0, 0.0]);
        let gaps = idealized_gd_check(1.0, 1.0, 0.5, 6, 2.0).unwrap();
        for (k, g) in gaps.iter().enumerate() {
            assert!((g - 0.25f64.powi(k as i32) * 2.0).abs() < 1e-15);
        }
        assert!(idealized_gd_check(1.0, 1.0, 0.3, 4, 0.0).unwrap().iter().all(|g| *g == 0.0));
        assert!(idealized_gd_check(1.0, 1.0, 1.5, 4, 1.0).is_err());
    }
}
