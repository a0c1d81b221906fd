//! Numerical self-checks: each compares an implementation against an
//! independent closed form, a second code path or a Monte Carlo rate, and
//! reports the measured values next to its tolerance.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    chi2_small_gamma_check, ess_infinity_gaussian, idealized_gd_check, kl_quadrature, pl_bound, quadrature_reward,
    tilted_optimum, QuadratureGrid,
};
use crate::error::{config_err, Result};
use crate::estimators::{gradient_forward_kl, gradient_generic, gradient_reverse_kl, surrogate_gradient};
use crate::kernels::{incremental_log_weight, incremental_log_weight_direct, log_weight_from, ula_step, PointEval, UlaKernel};
use crate::models::{sample_exact, GaussianLocation, MlpArchitecture, MlpEnergy};
use crate::par;
use crate::particles::{normalize_weights, WeightVector};
use crate::rewards::{HalfPlane, Reward};
use crate::rng::RngStreams;

/// Result of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Tolerance of the headline comparison.
    pub tolerance: f64,
    pub measured: BTreeMap<String, f64>,
    pub seconds: f64,
}

/// Every check, in report order.
pub const CHECK_NAMES: [&str; 10] = [
    "weight_identity",
    "feynman_kac",
    "mse_slope",
    "idealized_rate",
    "ess_infinity",
    "chi2_small_gamma",
    "gradient_oracle",
    "surrogate_equivalence",
    "kl_quadrature",
    "tilted_monotonicity",
];

struct Partial {
    passed: bool,
    tolerance: f64,
    measured: Vec<(String, f64)>,
}

fn partial(passed: bool, tolerance: f64, measured: &[(&str, f64)]) -> Partial {
    Partial {
        passed,
        tolerance,
        measured: measured.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

/// Runs the named check with the given root seed.
pub fn run_check(name: &str, seed: u64) -> Result<CheckOutcome> {
    let streams = RngStreams::new(seed);
    let start = Instant::now();
    let p = match name {
        "weight_identity" => weight_identity(&streams)?,
        "feynman_kac" => feynman_kac(&streams)?,
        "mse_slope" => mse_slope(&streams)?,
        "idealized_rate" => idealized_rate()?,
        "ess_infinity" => ess_infinity(&streams)?,
        "chi2_small_gamma" => chi2_small_gamma()?,
        "gradient_oracle" => gradient_oracle(&streams)?,
        "surrogate_equivalence" => surrogate_equivalence(&streams)?,
        "kl_quadrature" => kl_against_closed_form()?,
        "tilted_monotonicity" => tilted_monotonicity(),
        other => {
            return Err(config_err(format!(
                "unknown check {other:?}; available: {}",
                CHECK_NAMES.join(", ")
            )))
        }
    };
    Ok(CheckOutcome {
        name: name.to_string(),
        passed: p.passed,
        tolerance: p.tolerance,
        measured: p.measured.into_iter().collect(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs the named checks, or all of them when `names` is empty.
pub fn run_checks(names: &[String], seed: u64) -> Result<Vec<CheckOutcome>> {
    if names.is_empty() {
        CHECK_NAMES.iter().map(|n| run_check(n, seed)).collect()
    } else {
        names.iter().map(|n| run_check(n, seed)).collect()
    }
}

fn random_spd<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    let l: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| l[i * d + k] * l[j * d + k]).sum::<f64>();
        }
        a[i * d + i] += 0.5;
    }
    a
}

fn uniform_vec<R: Rng>(d: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(lo..hi)).collect()
}

/// Compact α-form log-weights against the direct Gaussian log-ratio.
fn weight_identity(streams: &RngStreams) -> Result<Partial> {
    const TOL: f64 = 1e-9;
    let mut rng = streams.stream("weight_identity", 0);
    let mut max_err: f64 = 0.0;
    let instances = 1000;
    for i in 0..instances {
        let d = 1 + i % 3;
        let cov = random_spd(d, &mut rng);
        let prev = GaussianLocation::new(uniform_vec(d, -2.0, 2.0, &mut rng), cov.clone())?;
        let curr = GaussianLocation::new(uniform_vec(d, -2.0, 2.0, &mut rng), cov)?;
        let x_prev = uniform_vec(d, -3.0, 3.0, &mut rng);
        let x_curr = uniform_vec(d, -3.0, 3.0, &mut rng);
        let kernel = UlaKernel::new(rng.random_range(0.01..0.5), 1.0)?;
        let a = incremental_log_weight(&prev, &curr, &x_prev, &x_curr, &kernel)?;
        let b = incremental_log_weight_direct(&prev, &curr, &x_prev, &x_curr, &kernel)?;
        max_err = max_err.max((a - b).abs());
    }
    Ok(partial(
        max_err <= TOL,
        TOL,
        &[("instances", instances as f64), ("max_abs_error", max_err)],
    ))
}

/// Runs weighted ULA moves along a schedule of `N(θ, 1)` targets, starting from
/// exact samples of the first, and returns the final particles and weights.
fn weighted_schedule(schedule: &[f64], n: usize, gamma: f64, streams: &RngStreams) -> Result<(Vec<f64>, WeightVector)> {
    let kernel = UlaKernel::new(gamma, 1.0)?;
    let first = GaussianLocation::isotropic(vec![schedule[0]]);
    let mut x = sample_exact(&first, 1, n, streams, "init", 0);
    let mut log_w = vec![0.0; n];
    for (k, pair) in schedule.windows(2).enumerate() {
        let (tp, tc) = (pair[0], pair[1]);
        par::for_each_row_mut2(&mut x, 1, &mut log_w, 1, |i, xi, lw| {
            let mut noise = [0.0];
            streams.fill_normal("particles", k as u64, i as u64, &mut noise);
            let x_prev = xi[0];
            let g_prev = [x_prev - tp];
            let mut next = [0.0];
            ula_step(&[x_prev], &g_prev, &kernel, &noise, &mut next);
            let g_curr = [next[0] - tc];
            let prev = PointEval {
                u: 0.5 * g_prev[0] * g_prev[0],
                grad: &g_prev,
            };
            let curr = PointEval {
                u: 0.5 * g_curr[0] * g_curr[0],
                grad: &g_curr,
            };
            lw[0] += log_weight_from(prev, curr, &[x_prev], &next, &kernel);
            xi[0] = next[0];
        });
    }
    Ok((x, normalize_weights(&log_w)?))
}

/// Self-normalised weighted mean after a 3-step schedule against the final target.
fn feynman_kac(streams: &RngStreams) -> Result<Partial> {
    let schedule = [0.0, 0.5, 1.0, 1.5];
    let (x, w) = weighted_schedule(&schedule, 100_000, 0.1, &streams.child("feynman_kac", 0))?;
    let ws = w.as_slice();
    let mean: f64 = ws.iter().zip(&x).map(|(w, x)| w * x).sum();
    let se = ws.iter().zip(&x).map(|(w, x)| w * w * (x - mean) * (x - mean)).sum::<f64>().sqrt();
    let z = (mean - schedule[3]).abs() / se;
    Ok(partial(
        z < 3.0,
        3.0,
        &[("estimate", mean), ("target", schedule[3]), ("standard_error", se), ("z", z), ("ess", w.ess())],
    ))
}

/// Least-squares slope of `log MSE` against `log N` for the weighted
/// gradient of `H_θ(x) = θ - x - b`, whose exact expectation is `-b`.
fn mse_slope(streams: &RngStreams) -> Result<Partial> {
    const B: f64 = 0.3;
    let schedule = [0.0, 0.4, 0.8, 1.2];
    let sizes = [100usize, 1000, 10_000];
    let reps = 100;
    let mut mses = Vec::new();
    for &n in &sizes {
        let errs: Vec<f64> = (0..reps)
            .map(|r| -> Result<f64> {
                let s = streams.child("mse_slope", (n * reps + r) as u64);
                let (x, w) = weighted_schedule(&schedule, n, 0.1, &s)?;
                let theta = schedule[3];
                let g = gradient_generic(&x, 1, &w, 1, |xi, out| out[0] = theta - xi[0] - B)?;
                Ok((g.g[0] + B).powi(2))
            })
            .collect::<Result<_>>()?;
        mses.push(errs.iter().sum::<f64>() / reps as f64);
    }
    let lx: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = mses.iter().map(|m| m.ln()).collect();
    let mx = lx.iter().sum::<f64>() / 3.0;
    let my = ly.iter().sum::<f64>() / 3.0;
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / lx.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
    Ok(partial(
        (slope + 1.0).abs() <= 0.3,
        0.3,
        &[("slope", slope), ("mse_n100", mses[0]), ("mse_n1000", mses[1]), ("mse_n10000", mses[2])],
    ))
}

/// Exact gradient descent on `½ μ θ²` against the PL rate bound.
fn idealized_rate() -> Result<Partial> {
    const SLACK: f64 = 1e-12;
    let mut worst = f64::NEG_INFINITY;
    for (mu, gamma) in [(1.0, 0.5), (1.0, 1.0), (0.5, 1.0)] {
        let gaps = idealized_gd_check(mu, mu, gamma, 50, 2.0)?;
        for (k, gap) in gaps.iter().enumerate() {
            worst = worst.max(gap - pl_bound(mu, gamma, k, gaps[0]));
        }
    }
    Ok(partial(worst <= SLACK, SLACK, &[("max_excess_over_bound", worst)]))
}

/// Empirical ESS/N after one exact reweighting against the closed form.
fn ess_infinity(streams: &RngStreams) -> Result<Partial> {
    const TOL: f64 = 0.05;
    let n = 100_000;
    let cov = vec![1.0, 0.3, 0.3, 0.5];
    let grad_l = [1.0, -0.5];
    let prev = GaussianLocation::new(vec![0.0, 0.0], cov.clone())?;
    let x = sample_exact(&prev, 2, n, streams, "ess_infinity", 0);
    let u_prev = crate::models::potentials(&prev, &x)?;
    let mut measured = Vec::new();
    let mut worst: f64 = 0.0;
    for gamma in [0.05, 0.1, 0.2] {
        let theta: Vec<f64> = grad_l.iter().map(|g| -gamma * g).collect();
        let curr = GaussianLocation::new(theta, cov.clone())?;
        let u_curr = crate::models::potentials(&curr, &x)?;
        let lw: Vec<f64> = u_prev.iter().zip(&u_curr).map(|(a, b)| a - b).collect();
        let empirical = normalize_weights(&lw)?.ess() / n as f64;
        let formula = ess_infinity_gaussian(1.0, gamma, &grad_l, prev.precision());
        let rel = (empirical - formula).abs() / formula;
        worst = worst.max(rel);
        measured.push((format!("empirical_gamma_{gamma}"), empirical));
        measured.push((format!("formula_gamma_{gamma}"), formula));
    }
    measured.push(("max_relative_error".to_string(), worst));
    Ok(Partial {
        passed: worst < TOL,
        tolerance: TOL,
        measured,
    })
}

/// Exact χ² over its Fisher approximation shrinks to one as γ → 0.
fn chi2_small_gamma() -> Result<Partial> {
    const TOL: f64 = 1e-4;
    const EXPECTED: f64 = 1.00502;
    let model = GaussianLocation::isotropic(vec![0.0, 0.0]);
    let grad_l = [1.0, 0.0];
    let mut ratios = Vec::new();
    for gamma in [0.4, 0.2, 0.1, 0.05, 0.025] {
        let (exact, approx) = chi2_small_gamma_check(&model, gamma, &grad_l)?;
        ratios.push(exact / approx);
    }
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]) && ratios.iter().all(|r| *r > 1.0);
    let at_001 = ratios[2];
    Ok(partial(
        decreasing && (at_001 - EXPECTED).abs() < TOL,
        TOL,
        &[
            ("ratio_at_0.01", at_001),
            ("expected_at_0.01", EXPECTED),
            ("ratio_smallest_gamma", ratios[4]),
            ("monotone", if decreasing { 1.0 } else { 0.0 }),
        ],
    ))
}

fn central_difference<F: Fn(f64) -> Result<f64>>(f: F, theta: f64, h: f64) -> Result<f64> {
    Ok((f(theta + h)? - f(theta - h)?) / (2.0 * h))
}

/// Particle gradients on a 1-d Gaussian location model against finite
/// differences of the quadrature objective.
fn gradient_oracle(streams: &RngStreams) -> Result<Partial> {
    const TOL: f64 = 1e-2;
    let n = 100_000;
    let theta = 0.0;
    let beta = 0.1;
    let reward = Reward::MultiModal {
        centers: vec![vec![2.0]],
        tau: 4.0,
    };
    let grid = QuadratureGrid::cube(1, -14.0, 14.0, 40_001)?;
    let base = GaussianLocation::isotropic(vec![0.0]);
    let model = GaussianLocation::isotropic(vec![theta]);
    let x = sample_exact(&model, 1, n, streams, "oracle_particles", 0);
    let w = WeightVector::uniform(n);

    let reverse_obj = |t: f64| -> Result<f64> {
        let m = GaussianLocation::isotropic(vec![t]);
        Ok(quadrature_reward(&m, &reward, &grid)? - beta * kl_quadrature(&m, &base, &grid)?)
    };
    let reverse_fd = central_difference(reverse_obj, theta, 1e-3)?;
    let reverse = gradient_reverse_kl(&x, &w, &model, &base, &reward, beta)?.g[0];
    let reverse_err = (reverse - reverse_fd).abs() / reverse_fd.abs();

    let reference = GaussianLocation::isotropic(vec![-0.5]);
    let ref_batch = sample_exact(&reference, 1, n, streams, "oracle_reference", 0);
    let forward_obj = |t: f64| -> Result<f64> {
        let m = GaussianLocation::isotropic(vec![t]);
        Ok(quadrature_reward(&m, &reward, &grid)? - beta * kl_quadrature(&reference, &m, &grid)?)
    };
    let forward_fd = central_difference(forward_obj, theta, 1e-3)?;
    let forward = gradient_forward_kl(&x, &w, &model, &reward, beta, &ref_batch)?.g[0];
    let forward_err = (forward - forward_fd).abs() / forward_fd.abs();

    Ok(partial(
        reverse_err < TOL && forward_err < TOL,
        TOL,
        &[
            ("reverse_estimate", reverse),
            ("reverse_finite_difference", reverse_fd),
            ("reverse_relative_error", reverse_err),
            ("forward_estimate", forward),
            ("forward_finite_difference", forward_fd),
            ("forward_relative_error", forward_err),
        ],
    ))
}

/// Backpropagated surrogate gradient against the negated reverse-KL estimate
/// on random small networks.
fn surrogate_equivalence(streams: &RngStreams) -> Result<Partial> {
    const TOL: f64 = 1e-9;
    let mut rng = streams.stream("surrogate", 0);
    let mut worst: f64 = 0.0;
    let instances = 50;
    let reward = Reward::HalfPlane { side: HalfPlane::Lower };
    for i in 0..instances {
        let arch = MlpArchitecture::new(2, rng.random_range(3..=8), rng.random_range(1..=3));
        let model = MlpEnergy::init(arch.clone(), 0.5, &mut streams.lane("surrogate_model", i, 0))?;
        let frozen = MlpEnergy::init(arch, 0.5, &mut streams.lane("surrogate_model", i, 1))?;
        let n = 16;
        let x = uniform_vec(2 * n, -3.0, 3.0, &mut rng);
        let lw = uniform_vec(n, -2.0, 2.0, &mut rng);
        let w = normalize_weights(&lw)?;
        let beta = rng.random_range(0.05..1.0);
        let s = surrogate_gradient(&x, &w, &model, &frozen, &reward, beta)?;
        let g = gradient_reverse_kl(&x, &w, &model, &frozen, &reward, beta)?.g;
        for (a, b) in s.iter().zip(&g) {
            worst = worst.max((a + b).abs());
        }
    }
    Ok(partial(
        worst < TOL,
        TOL,
        &[("instances", instances as f64), ("max_abs_difference", worst)],
    ))
}

/// Grid KL between two 2-d Gaussians against `½ δᵀ Σ⁻¹ δ`.
fn kl_against_closed_form() -> Result<Partial> {
    const TOL: f64 = 1e-6;
    let cov = vec![0.8, 0.2, 0.2, 0.6];
    let p = GaussianLocation::new(vec![0.3, -0.2], cov.clone())?;
    let q = GaussianLocation::new(vec![0.0, 0.0], cov)?;
    let grid = QuadratureGrid::default_2d();
    let kl = kl_quadrature(&p, &q, &grid)?;
    let prec = p.precision();
    let delta = [0.3, -0.2];
    let exact = 0.5
        * (0..2)
            .map(|i| delta[i] * (0..2).map(|j| prec[i * 2 + j] * delta[j]).sum::<f64>())
            .sum::<f64>();
    let self_kl = kl_quadrature(&p, &p, &grid)?;
    let err = (kl - exact).abs();
    Ok(partial(
        err < TOL && self_kl.abs() < 1e-9,
        TOL,
        &[("quadrature", kl), ("closed_form", exact), ("abs_error", err), ("self_kl", self_kl)],
    ))
}

/// The tilted optimum decreases in β and increases in `π₀(H)` on a 20 × 20 grid.
fn tilted_monotonicity() -> Partial {
    const TOL: f64 = 1e-6;
    let masses: Vec<f64> = (0..20).map(|i| 0.025 + 0.05 * i as f64).collect();
    let betas: Vec<f64> = (0..20).map(|i| 0.05 + 0.1 * i as f64).collect();
    let mut violations = 0;
    for (i, &m) in masses.iter().enumerate() {
        for (j, &b) in betas.iter().enumerate() {
            let v = tilted_optimum(m, b);
            if j + 1 < betas.len() && tilted_optimum(m, betas[j + 1]) > v {
                violations += 1;
            }
            if i + 1 < masses.len() && tilted_optimum(masses[i + 1], b) < v {
                violations += 1;
            }
        }
    }
    let example = tilted_optimum(0.5, 1.0);
    let expected = std::f64::consts::E / (std::f64::consts::E + 1.0);
    let err = (example - expected).abs();
    partial(
        violations == 0 && err < TOL,
        TOL,
        &[("violations", violations as f64), ("half_mass_unit_beta", example), ("abs_error", err)],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_check_is_rejected() {
        assert!(run_check("everything", 0).is_err());
    }

    #[test]
    fn cheap_checks_pass() {
        for name in ["weight_identity", "idealized_rate", "chi2_small_gamma", "kl_quadrature", "tilted_monotonicity"] {
            let out = run_check(name, 0).unwrap();
            assert!(out.passed, "{out:?}");
        }
    }
}
