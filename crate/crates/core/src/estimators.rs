//! Gradient estimators built from weighted particles.
//!
//! Sign convention: the reward-tuning estimators return `g ≈ ∇ℓ` for the
//! maximisation objective `ℓ(θ) = E_{π_θ}[R] - β·KL`. Tuning loops hand `-g`
//! to a descent optimiser. The generic estimator returns `Σ w_i H(X_i)` as is.
//!
//! Particles and weights are constants throughout: only `∇_θ U_θ` at fixed
//! states enters, never a derivative through the sampler.

use crate::error::{config_err, ensure_finite, Error, Result};
use crate::models::{self, GibbsModel};
use crate::par;
use crate::particles::WeightVector;
use crate::rewards::Reward;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub g: Vec<f64>,
    /// `Σ w_i R(X_i)` for reward objectives.
    pub particle_reward: Option<f64>,
    /// ESS of the weights used.
    pub ess: f64,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.g.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_weights(positions: &[f64], dim: usize, weights: &WeightVector) -> Result<usize> {
    let n = weights.len();
    if positions.len() != n * dim {
        return Err(Error::Dimension {
            expected: n * dim,
            got: positions.len(),
        });
    }
    Ok(n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    par::sum(a.len(), |i| a[i] * b[i])
}

fn finish(g: Vec<f64>, particle_reward: Option<f64>, weights: &WeightVector) -> Result<GradientEstimate> {
    ensure_finite(&g, "gradient estimate")?;
    Ok(GradientEstimate {
        g,
        particle_reward,
        ess: weights.ess(),
    })
}

/// `Σ_i w_i H(X_i)` for a vector-valued `H` of the given width.
pub fn gradient_generic<F>(positions: &[f64], dim: usize, weights: &WeightVector, width: usize, h: F) -> Result<GradientEstimate>
where
    F: Fn(&[f64], &mut [f64]) + Sync + Send,
{
    let g = crate::particles::weighted_mean_rows(positions, dim, weights, width, h)?;
    finish(g, None, weights)
}

/// Rewards of every particle; non-finite values are reported with the row.
pub fn rewards_of(reward: &Reward, positions: &[f64], dim: usize) -> Result<Vec<f64>> {
    let r = par::map_indexed(positions.len() / dim, |i| reward.evaluate(&positions[i * dim..(i + 1) * dim]));
    ensure_finite(&r, "reward")?;
    Ok(r)
}

/// Forward-KL estimator from precomputed rewards:
/// `-Σw R∇U + (Σw R)(Σw ∇U) - β [ mean_ref ∇U - Σw ∇U ]`.
pub fn forward_kl_from_parts<M: GibbsModel + ?Sized>(
    model: &M,
    positions: &[f64],
    weights: &WeightVector,
    rewards: &[f64],
    beta_kl: f64,
    reference_batch: &[f64],
) -> Result<GradientEstimate> {
    let d = model.dim();
    let n = check_weights(positions, d, weights)?;
    if reference_batch.is_empty() {
        return Err(config_err("forward-KL estimator needs a non-empty reference batch"));
    }
    let m = models::row_count(reference_batch, d)?;
    let w = weights.as_slice();
    let r_bar = dot(w, rewards);
    let coefs: Vec<f64> = (0..n).map(|i| -w[i] * (rewards[i] - r_bar) + beta_kl * w[i]).collect();
    let mut g = model.weighted_grad_theta_sum(positions, &coefs);
    if beta_kl != 0.0 {
        let ref_coefs = vec![-beta_kl / m as f64; m];
        let r = model.weighted_grad_theta_sum(reference_batch, &ref_coefs);
        for (a, b) in g.iter_mut().zip(r) {
            *a += b;
        }
    }
    finish(g, Some(r_bar), weights)
}

pub fn gradient_forward_kl<M: GibbsModel + ?Sized>(
    positions: &[f64],
    weights: &WeightVector,
    model: &M,
    reward: &Reward,
    beta_kl: f64,
    reference_batch: &[f64],
) -> Result<GradientEstimate> {
    let rewards = rewards_of(reward, positions, model.dim())?;
    forward_kl_from_parts(model, positions, weights, &rewards, beta_kl, reference_batch)
}

/// `A(x) = R(x) + β (U_θ(x) - U_0(x))`, the per-particle covariance weight of
/// the reverse-KL gradient `∇ℓ = -Cov_π(A, ∇_θ U_θ)`.
pub fn reverse_kl_advantage(rewards: &[f64], u_theta: &[f64], u_frozen: &[f64], beta_kl: f64) -> Vec<f64> {
    rewards
        .iter()
        .zip(u_theta.iter().zip(u_frozen))
        .map(|(r, (ut, u0))| r + beta_kl * (ut - u0))
        .collect()
}

/// Reverse-KL estimator in covariance form from precomputed rewards and energies.
pub fn reverse_kl_from_parts<M: GibbsModel + ?Sized>(
    model: &M,
    positions: &[f64],
    weights: &WeightVector,
    rewards: &[f64],
    u_theta: &[f64],
    u_frozen: &[f64],
    beta_kl: f64,
) -> Result<GradientEstimate> {
    let n = check_weights(positions, model.dim(), weights)?;
    let a = reverse_kl_advantage(rewards, u_theta, u_frozen, beta_kl);
    ensure_finite(&a, "energy difference")?;
    let w = weights.as_slice();
    let a_bar = dot(w, &a);
    let coefs: Vec<f64> = (0..n).map(|i| -w[i] * (a[i] - a_bar)).collect();
    let g = model.weighted_grad_theta_sum(positions, &coefs);
    finish(g, Some(dot(w, rewards)), weights)
}

pub fn gradient_reverse_kl<M: GibbsModel + ?Sized>(
    positions: &[f64],
    weights: &WeightVector,
    model: &M,
    frozen: &M,
    reward: &Reward,
    beta_kl: f64,
) -> Result<GradientEstimate> {
    let rewards = rewards_of(reward, positions, model.dim())?;
    let u_theta = models::potentials(model, positions)?;
    let u_frozen = models::potentials(frozen, positions)?;
    reverse_kl_from_parts(model, positions, weights, &rewards, &u_theta, &u_frozen, beta_kl)
}

/// The four-term expanded reverse-KL estimator,
/// `-Σw R∇U + (Σw R)(Σw ∇U) - β Σw D∇U + β (Σw D)(Σw ∇U)` with `D = U_θ - U_0`,
/// each sum formed separately. Equal to the covariance form up to rounding.
pub fn gradient_reverse_kl_expanded<M: GibbsModel + ?Sized>(
    positions: &[f64],
    weights: &WeightVector,
    model: &M,
    frozen: &M,
    reward: &Reward,
    beta_kl: f64,
) -> Result<GradientEstimate> {
    let d = model.dim();
    let n = check_weights(positions, d, weights)?;
    let rewards = rewards_of(reward, positions, d)?;
    let u_theta = models::potentials(model, positions)?;
    let u_frozen = models::potentials(frozen, positions)?;
    let diff: Vec<f64> = u_theta.iter().zip(&u_frozen).map(|(a, b)| a - b).collect();
    let w = weights.as_slice();
    let wr: Vec<f64> = (0..n).map(|i| w[i] * rewards[i]).collect();
    let wd: Vec<f64> = (0..n).map(|i| w[i] * diff[i]).collect();
    let s_r = model.weighted_grad_theta_sum(positions, &wr);
    let s_1 = model.weighted_grad_theta_sum(positions, w);
    let s_d = model.weighted_grad_theta_sum(positions, &wd);
    let r_bar = dot(w, &rewards);
    let d_bar = dot(w, &diff);
    let g = (0..model.num_params())
        .map(|j| -s_r[j] + r_bar * s_1[j] - beta_kl * s_d[j] + beta_kl * d_bar * s_1[j])
        .collect();
    finish(g, Some(r_bar), weights)
}

/// Scalar surrogate losses with detached, centred weights:
/// `L_R = Σ w_i (R_i - R̄) U_θ(X_i)` and `L_KL = β Σ w_i (D_i - D̄) U_θ(X_i)`.
///
/// The parameter gradient of `L_R + L_KL` (weights held fixed) is the
/// negated reverse-KL estimate on the same particles.
pub fn surrogate_loss_values<M: GibbsModel + ?Sized>(
    positions: &[f64],
    weights: &WeightVector,
    model: &M,
    frozen: &M,
    reward: &Reward,
    beta_kl: f64,
) -> Result<(f64, f64)> {
    let (rc, kc, u_theta) = surrogate_coefficients(positions, weights, model, frozen, reward, beta_kl)?;
    Ok((dot(&rc, &u_theta), dot(&kc, &u_theta)))
}

/// Detached per-particle coefficients of the two surrogates, and `U_θ(X_i)`.
fn surrogate_coefficients<M: GibbsModel + ?Sized>(
    positions: &[f64],
    weights: &WeightVector,
    model: &M,
    frozen: &M,
    reward: &Reward,
    beta_kl: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = model.dim();
    let n = check_weights(positions, d, weights)?;
    let rewards = rewards_of(reward, positions, d)?;
    let u_theta = models::potentials(model, positions)?;
    let u_frozen = models::potentials(frozen, positions)?;
    let diff: Vec<f64> = u_theta.iter().zip(&u_frozen).map(|(a, b)| a - b).collect();
    let w = weights.as_slice();
    let r_bar = dot(w, &rewards);
    let d_bar = dot(w, &diff);
    let rc = (0..n).map(|i| w[i] * (rewards[i] - r_bar)).collect();
    let kc = (0..n).map(|i| beta_kl * w[i] * (diff[i] - d_bar)).collect();
    Ok((rc, kc, u_theta))
}

/// Gradient of `L_R + L_KL` by backpropagating the scalar loss through each
/// per-sample energy, then summing the per-sample parameter gradients.
pub fn surrogate_gradient<M: GibbsModel + ?Sized>(
    positions: &[f64],
    weights: &WeightVector,
    model: &M,
    frozen: &M,
    reward: &Reward,
    beta_kl: f64,
) -> Result<Vec<f64>> {
    let (rc, kc, _) = surrogate_coefficients(positions, weights, model, frozen, reward, beta_kl)?;
    let rows = models::grad_theta_batch(model, positions)?;
    let p = model.num_params();
    let mut g = vec![0.0; p];
    for (i, row) in rows.chunks_exact(p).enumerate() {
        let c = rc[i] + kc[i];
        for (a, b) in g.iter_mut().zip(row) {
            *a += c * b;
        }
    }
    Ok(g)
}

/// Time average of `H` over the last `T - burn_in` states of a chain.
pub fn soul_estimate<F>(chain: &[f64], dim: usize, burn_in: usize, width: usize, h: F) -> Result<GradientEstimate>
where
    F: Fn(&[f64], &mut [f64]) + Sync + Send,
{
    let t = chain.len() / dim;
    if burn_in >= t {
        return Err(config_err(format!("burn-in {burn_in} must be shorter than the chain length {t}")));
    }
    let kept = &chain[burn_in * dim..];
    let weights = WeightVector::uniform(t - burn_in);
    gradient_generic(kept, dim, &weights, width, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GaussianLocation, MlpArchitecture, MlpEnergy};
    use crate::particles::normalize_weights;
    use crate::rng::RngStreams;
    use proptest::prelude::*;

    fn gauss(theta: f64) -> GaussianLocation {
        GaussianLocation::isotropic(vec![theta])
    }

    #[test]
    fn generic_examples() {
        let w = WeightVector::uniform(2);
        let e = gradient_generic(&[1.0, 3.0], 1, &w, 1, |x, o| o[0] = x[0]).unwrap();
        assert_eq!(e.g, vec![2.0]);
        let w = normalize_weights(&[0.0, 2.0, -1.0]).unwrap();
        let e = gradient_generic(&[1.0, 3.0, 7.0], 1, &w, 1, |_, o| o[0] = 4.5).unwrap();
        assert!((e.g[0] - 4.5).abs() < 1e-15);
    }

    #[test]
    fn forward_kl_hand_example() {
        let m = gauss(0.0);
        let w = WeightVector::uniform(2);
        let e = gradient_forward_kl(&[-1.0, 1.0], &w, &m, &Reward::Constant { value: 0.0 }, 1.0, &[1.0]).unwrap();
        assert!((e.g[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_kl_constant_reward_without_penalty_is_zero() {
        let m = gauss(0.3);
        let w = normalize_weights(&[0.0, -0.5, 0.2]).unwrap();
        let e = gradient_forward_kl(&[-1.0, 0.4, 2.0], &w, &m, &Reward::Constant { value: 3.0 }, 0.0, &[0.0]).unwrap();
        assert!(e.g[0].abs() < 1e-14);
        assert!(gradient_forward_kl(&[0.0], &WeightVector::uniform(1), &m, &Reward::Constant { value: 0.0 }, 1.0, &[]).is_err());
    }

    #[test]
    fn reverse_kl_vanishes_at_reference_with_constant_reward() {
        let m = gauss(0.7);
        let w = normalize_weights(&[0.0, -0.5, 0.2]).unwrap();
        let e = gradient_reverse_kl(&[-1.0, 0.4, 2.0], &w, &m, &m.clone(), &Reward::Constant { value: 1.0 }, 0.25).unwrap();
        assert!(e.g[0].abs() < 1e-14);
    }

    #[test]
    fn reverse_and_forward_agree_without_penalty() {
        let m = gauss(0.2);
        let frozen = gauss(-1.0);
        let xs = [-1.5, -0.2, 0.3, 1.1];
        let w = normalize_weights(&[0.1, -0.3, 0.0, 0.4]).unwrap();
        let r = Reward::HalfPlane {
            side: crate::rewards::HalfPlane::Left,
        };
        let a = gradient_reverse_kl(&xs, &w, &m, &frozen, &r, 0.0).unwrap();
        let b = gradient_forward_kl(&xs, &w, &m, &r, 0.0, &[0.0]).unwrap();
        assert!((a.g[0] - b.g[0]).abs() < 1e-15);
    }

    #[test]
    fn soul_examples() {
        let chain = [2.0, 2.0, 2.0, 2.0];
        let e = soul_estimate(&chain, 1, 2, 1, |x, o| o[0] = x[0] * x[0]).unwrap();
        assert_eq!(e.g, vec![4.0]);
        let e = soul_estimate(&[1.0, 5.0, -3.0], 1, 2, 1, |x, o| o[0] = x[0]).unwrap();
        assert_eq!(e.g, vec![-3.0]);
        assert!(soul_estimate(&[1.0, 2.0], 1, 2, 1, |x, o| o[0] = x[0]).is_err());
    }

    #[test]
    fn surrogates_vanish_on_trivial_inputs() {
        let m = gauss(0.5);
        let (a, b) = surrogate_loss_values(&[0.1, 0.9], &WeightVector::uniform(2), &m, &m.clone(), &Reward::Constant { value: 2.0 }, 0.5).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
        let (a, b) = surrogate_loss_values(&[0.1], &WeightVector::uniform(1), &m, &gauss(0.0), &Reward::from_name("left").unwrap(), 0.5).unwrap();
        assert_eq!((a, b), (0.0, 0.0));
    }

    fn mlp_instance(seed: u64) -> (MlpEnergy, MlpEnergy, Vec<f64>, WeightVector) {
        let streams = RngStreams::new(seed);
        let arch = MlpArchitecture::new(2, 5, 2);
        let m = MlpEnergy::init(arch.clone(), 0.5, &mut streams.stream("a", 0)).unwrap();
        let f = MlpEnergy::init(arch, 0.5, &mut streams.stream("b", 0)).unwrap();
        let mut rng = streams.stream("x", 0);
        let mut xs = vec![0.0; 2 * 40];
        crate::rng::fill_standard_normal(&mut rng, &mut xs);
        let mut lw = vec![0.0; 40];
        crate::rng::fill_standard_normal(&mut rng, &mut lw);
        (m, f, xs, normalize_weights(&lw).unwrap())
    }

    #[test]
    fn surrogate_gradient_is_negated_estimate() {
        for seed in 0..5 {
            let (m, f, xs, w) = mlp_instance(seed);
            let r = Reward::from_name("lower").unwrap();
            let g = gradient_reverse_kl(&xs, &w, &m, &f, &r, 0.3).unwrap().g;
            let s = surrogate_gradient(&xs, &w, &m, &f, &r, 0.3).unwrap();
            for (a, b) in g.iter().zip(&s) {
                assert!((a + b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn expanded_and_concise_reverse_forms_agree(seed in 0u64..1000, beta in 0.0f64..2.0) {
            let (m, f, xs, w) = mlp_instance(seed);
            let r = Reward::from_name("upper").unwrap();
            let a = gradient_reverse_kl(&xs, &w, &m, &f, &r, beta).unwrap().g;
            let b = gradient_reverse_kl_expanded(&xs, &w, &m, &f, &r, beta).unwrap().g;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn estimators_are_self_normalised_and_permutation_invariant(
            lw in prop::collection::vec(-3.0f64..3.0, 6),
            xs in prop::collection::vec(-3.0f64..3.0, 6),
            shift in -5.0f64..5.0,
            rshift in -3.0f64..3.0,
        ) {
            let m = gauss(0.4);
            let f = gauss(-0.3);
            let r = Reward::from_name("left").unwrap();
            let w = normalize_weights(&lw).unwrap();
            let base = gradient_reverse_kl(&xs, &w, &m, &f, &r, 0.5).unwrap().g[0];
            let fwd = gradient_forward_kl(&xs, &w, &m, &r, 0.5, &[0.2, -0.1]).unwrap().g[0];

            let shifted: Vec<f64> = lw.iter().map(|v| v + shift).collect();
            let ws = normalize_weights(&shifted).unwrap();
            prop_assert!((gradient_reverse_kl(&xs, &ws, &m, &f, &r, 0.5).unwrap().g[0] - base).abs() < 1e-12);

            let perm = [3usize, 0, 5, 1, 4, 2];
            let xp: Vec<f64> = perm.iter().map(|&i| xs[i]).collect();
            let lp: Vec<f64> = perm.iter().map(|&i| lw[i]).collect();
            let wp = normalize_weights(&lp).unwrap();
            prop_assert!((gradient_reverse_kl(&xp, &wp, &m, &f, &r, 0.5).unwrap().g[0] - base).abs() < 1e-12);
            prop_assert!((gradient_forward_kl(&xp, &wp, &m, &r, 0.5, &[0.2, -0.1]).unwrap().g[0] - fwd).abs() < 1e-12);

            let rewards: Vec<f64> = xs.iter().map(|x| if *x < 0.0 { 1.0 } else { 0.0 }).collect();
            let moved: Vec<f64> = rewards.iter().map(|v| v + rshift).collect();
            let ut = models::potentials(&m, &xs).unwrap();
            let u0 = models::potentials(&f, &xs).unwrap();
            let a = reverse_kl_from_parts(&m, &xs, &w, &moved, &ut, &u0, 0.5).unwrap().g[0];
            prop_assert!((a - base).abs() < 1e-10);
            let b = forward_kl_from_parts(&m, &xs, &w, &moved, 0.5, &[0.2, -0.1]).unwrap().g[0];
            prop_assert!((b - fwd).abs() < 1e-10);
        }
    }
}
