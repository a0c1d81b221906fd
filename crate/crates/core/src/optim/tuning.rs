//! Full tuning loops: SOSMC-ULA, ImpDiff and SOUL.
//!
//! Every loop follows the same ordering per outer iteration `k`:
//! normalise weights, estimate `g_k` at `θ_k`, update `θ_{k+1} = OPT(θ_k, ·)`,
//! then propagate the particles with the ULA kernel under `θ_k`. SOSMC weights
//! the move with the backward kernel under `θ_{k+1}`, so the weighted
//! population targets `π_{θ_{k+1}}` when the next estimate is formed.
//!
//! Row `k` of the trace describes the estimate made at `θ_k`; its checkpoint
//! columns describe `θ_{k+1}`, the parameters after that row's update.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::estimators::{self, GradientEstimate};
use crate::kernels::{log_weight_from, ula_step, PointEval, UlaKernel};
use crate::models::{self, ExactSampler, GibbsModel};
use crate::par;
use crate::particles::{normalize_weights, resample_indices, WeightVector};
use crate::rewards::Reward;
use crate::rng::{fill_standard_normal, RngStreams};

use super::adapter::StepSizeAdapter;
use super::optimizers::{OptState, OptimizerSpec};
use super::trace::{TraceRow, TuningTrace};

/// Loop settings shared by all three tuning methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConfig {
    /// Particles for SOSMC/ImpDiff; chain length per outer iteration for SOUL.
    pub n_particles: usize,
    pub k_outer: usize,
    #[serde(default = "one")]
    pub k_inner: usize,
    pub gamma0: f64,
    #[serde(default = "unit")]
    pub sigma_noise: f64,
    pub optimizer: OptimizerSpec,
    #[serde(default = "default_tau_resample")]
    pub tau_resample: f64,
    #[serde(default)]
    pub adapt_gamma: bool,
    #[serde(default = "default_tau_adapt")]
    pub tau_adapt: f64,
    #[serde(default = "default_adapt_factor")]
    pub adapt_factor: f64,
    #[serde(default)]
    pub seed: u64,
    /// Size of the fresh reference batch drawn every iteration (forward KL).
    #[serde(default = "default_reference_batch")]
    pub reference_batch_size: usize,
    /// Checkpoint period; `0` disables checkpoints.
    #[serde(default)]
    pub eval_every: usize,
    /// Stops the run after this many seconds, if set.
    #[serde(default)]
    pub wall_clock_budget_s: Option<f64>,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn default_tau_resample() -> f64 {
    0.9
}

fn default_tau_adapt() -> f64 {
    0.95
}

fn default_adapt_factor() -> f64 {
    1.1
}

fn default_reference_batch() -> usize {
    5000
}

impl TuningConfig {
    /// Defaults for everything except the particle count, iteration count,
    /// initial step size and optimiser.
    pub fn new(n_particles: usize, k_outer: usize, gamma0: f64, optimizer: OptimizerSpec) -> Self {
        Self {
            n_particles,
            k_outer,
            k_inner: 1,
            gamma0,
            sigma_noise: 1.0,
            optimizer,
            tau_resample: default_tau_resample(),
            adapt_gamma: false,
            tau_adapt: default_tau_adapt(),
            adapt_factor: default_adapt_factor(),
            seed: 0,
            reference_batch_size: default_reference_batch(),
            eval_every: 0,
            wall_clock_budget_s: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(config_err("at least one particle is required"));
        }
        if self.k_inner == 0 {
            return Err(config_err("k_inner must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.tau_resample) {
            return Err(config_err("tau_resample must lie in [0, 1]"));
        }
        if self.reference_batch_size == 0 {
            return Err(config_err("reference batch size must be positive"));
        }
        UlaKernel::new(self.gamma0, self.sigma_noise)?;
        StepSizeAdapter::new(self.gamma0, self.adapt_factor, self.tau_adapt)?;
        self.optimizer.validate()
    }
}

/// What the loop optimises.
///
/// Reward objectives produce `g ≈ ∇ℓ` of a maximisation problem and the loop
/// descends along `-g`; the generic objective supplies `H_θ(x)` with
/// `∇ℓ(θ) = E_{π_θ}[H_θ(X)]` for a minimisation and descends along `g`.
pub enum Objective<'a, M> {
    ForwardKl {
        reward: &'a Reward,
        beta_kl: f64,
        /// Exact sampler of the reference distribution `π_0`.
        reference: &'a dyn ExactSampler,
    },
    ReverseKl {
        reward: &'a Reward,
        beta_kl: f64,
        /// Frozen reference model `U_0`.
        frozen: &'a M,
    },
    Generic {
        /// Writes `H_θ(x)` (length `d_θ`) for the current model.
        h: &'a (dyn Fn(&M, &[f64], &mut [f64]) + Sync),
    },
}

impl<M> Objective<'_, M> {
    fn descent_sign(&self) -> f64 {
        match self {
            Objective::Generic { .. } => 1.0,
            _ => -1.0,
        }
    }
}

/// Sparse evaluation results attached to a trace row.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckpointValues {
    pub fresh_reward: Option<f64>,
    pub kl_quadrature: Option<f64>,
}

/// Evaluation hook called as `hook(k, &model_after_update)`.
pub type CheckpointFn<'a, M> = dyn FnMut(usize, &M) -> Result<CheckpointValues> + 'a;

#[derive(Debug, Clone)]
pub struct TuningOutcome<M> {
    pub model: M,
    pub trace: TuningTrace,
    pub final_gamma: f64,
}

/// A run that stopped on an error, with the rows recorded before it.
#[derive(Debug)]
pub struct TuningFailure {
    pub error: Error,
    pub trace: TuningTrace,
}

impl std::fmt::Display for TuningFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.trace.len())
    }
}

impl std::error::Error for TuningFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type TuningResult<M> = std::result::Result<TuningOutcome<M>, TuningFailure>;

/// Which loop to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sosmc,
    Impdiff,
    Soul,
}

impl Method {
    pub fn run<M: GibbsModel + Clone>(
        self,
        config: &TuningConfig,
        model: M,
        objective: &Objective<'_, M>,
        initial: &[f64],
        checkpoint: Option<&mut CheckpointFn<'_, M>>,
    ) -> TuningResult<M> {
        match self {
            Method::Sosmc => sosmc_run(config, model, objective, initial, checkpoint),
            Method::Impdiff => impdiff_run(config, model, objective, initial, checkpoint),
            Method::Soul => soul_run(config, model, objective, initial, checkpoint),
        }
    }
}

/// Particle reward, ESS and descent direction from one estimate.
fn estimate<M: GibbsModel>(
    objective: &Objective<'_, M>,
    model: &M,
    positions: &[f64],
    weights: &WeightVector,
    u_theta: Option<&[f64]>,
    u_frozen: Option<&[f64]>,
    config: &TuningConfig,
    streams: &RngStreams,
    k: usize,
) -> Result<GradientEstimate> {
    let d = model.dim();
    match objective {
        Objective::Generic { h } => {
            estimators::gradient_generic(positions, d, weights, model.num_params(), |x, out| h(model, x, out))
        }
        Objective::ForwardKl {
            reward,
            beta_kl,
            reference,
        } => {
            let rewards = estimators::rewards_of(reward, positions, d)?;
            let batch = if *beta_kl != 0.0 {
                models::sample_exact(*reference, d, config.reference_batch_size, streams, "reference", k as u64)
            } else {
                vec![0.0; d]
            };
            estimators::forward_kl_from_parts(model, positions, weights, &rewards, *beta_kl, &batch)
        }
        Objective::ReverseKl {
            reward,
            beta_kl,
            frozen,
        } => {
            let rewards = estimators::rewards_of(reward, positions, d)?;
            let owned_theta;
            let u_t = match u_theta {
                Some(u) => u,
                None => {
                    owned_theta = models::potentials(model, positions)?;
                    &owned_theta
                }
            };
            let owned_frozen;
            let u_0 = match u_frozen {
                Some(u) => u,
                None => {
                    owned_frozen = models::potentials(*frozen, positions)?;
                    &owned_frozen
                }
            };
            estimators::reverse_kl_from_parts(model, positions, weights, &rewards, u_t, u_0, *beta_kl)
        }
    }
}

/// Shared bookkeeping: optimiser, trace, clock and checkpoints.
struct LoopState<'c, 'h, M> {
    opt: OptState,
    theta: Vec<f64>,
    trace: TuningTrace,
    start: Instant,
    checkpoint: Option<&'c mut CheckpointFn<'h, M>>,
}

impl<'c, 'h, M: GibbsModel> LoopState<'c, 'h, M> {
    fn new(config: &TuningConfig, model: &M, checkpoint: Option<&'c mut CheckpointFn<'h, M>>) -> Result<Self> {
        Ok(Self {
            opt: OptState::new(config.optimizer.clone(), model.num_params())?,
            theta: model.params().to_vec(),
            trace: TuningTrace::default(),
            start: Instant::now(),
            checkpoint,
        })
    }

    /// Applies the optimiser step for estimate `est` and updates `model`.
    fn update(&mut self, model: &mut M, est: &GradientEstimate, sign: f64) -> Result<()> {
        let direction: Vec<f64> = est.g.iter().map(|v| sign * v).collect();
        self.opt.step(&mut self.theta, &direction)?;
        model.set_params(&self.theta)
    }

    fn record(&mut self, config: &TuningConfig, k: usize, model: &M, row: TraceRow) -> Result<()> {
        self.trace.rows.push(row);
        let due = config.eval_every > 0 && ((k + 1) % config.eval_every == 0 || k + 1 == config.k_outer);
        if due {
            if let Some(hook) = self.checkpoint.as_deref_mut() {
                let values = hook(k, model)?;
                let last = self.trace.rows.last_mut().expect("row just pushed");
                last.fresh_reward = values.fresh_reward;
                last.kl_quadrature = values.kl_quadrature;
            }
        }
        self.trace.elapsed_s.push(self.start.elapsed().as_secs_f64());
        Ok(())
    }

    fn out_of_time(&self, config: &TuningConfig) -> bool {
        config
            .wall_clock_budget_s
            .is_some_and(|b| self.start.elapsed().as_secs_f64() >= b)
    }
}

fn check_initial(config: &TuningConfig, dim: usize, initial: &[f64], rows: usize) -> Result<()> {
    config.validate()?;
    if initial.len() != rows * dim {
        return Err(Error::Dimension {
            expected: rows * dim,
            got: initial.len(),
        });
    }
    crate::error::ensure_finite(initial, "initial particle coordinate")
}

/// One ULA move of every particle, writing into `out`.
fn propagate(positions: &[f64], grads: &[f64], kernel: &UlaKernel, streams: &RngStreams, counter: u64, dim: usize, out: &mut [f64]) {
    par::for_each_row_mut(out, dim, |i, row| {
        let mut noise = [0.0; 8];
        let mut heap;
        let xi: &mut [f64] = if dim <= noise.len() {
            &mut noise[..dim]
        } else {
            heap = vec![0.0; dim];
            &mut heap
        };
        streams.fill_normal("particles", counter, i as u64, xi);
        let x = &positions[i * dim..(i + 1) * dim];
        let g = &grads[i * dim..(i + 1) * dim];
        ula_step(x, g, kernel, xi, row);
    });
}

/// SOSMC with the ULA forward kernel and ULA-reversal backward kernel.
///
/// `initial` holds `N` row-major particles, typically exact draws from
/// `π_{θ_0}` so that the initial weights are uniform.
pub fn sosmc_run<M: GibbsModel + Clone>(
    config: &TuningConfig,
    model: M,
    objective: &Objective<'_, M>,
    initial: &[f64],
    checkpoint: Option<&mut CheckpointFn<'_, M>>,
) -> TuningResult<M> {
    let mut model = model;
    let mut state = match LoopState::new(config, &model, checkpoint) {
        Ok(s) => s,
        Err(error) => return Err(TuningFailure { error, trace: TuningTrace::default() }),
    };
    match sosmc_inner(config, &mut model, objective, initial, &mut state) {
        Ok(gamma) => Ok(TuningOutcome {
            model,
            trace: state.trace,
            final_gamma: gamma,
        }),
        Err(error) => Err(TuningFailure { error, trace: state.trace }),
    }
}

fn sosmc_inner<M: GibbsModel + Clone>(
    config: &TuningConfig,
    model: &mut M,
    objective: &Objective<'_, M>,
    initial: &[f64],
    state: &mut LoopState<'_, '_, M>,
) -> Result<f64> {
    let n = config.n_particles;
    let d = model.dim();
    check_initial(config, d, initial, n)?;
    let streams = RngStreams::new(config.seed);
    let mut adapter = StepSizeAdapter::new(config.gamma0, config.adapt_factor, config.tau_adapt)?;
    let frozen = match objective {
        Objective::ReverseKl { frozen, .. } => Some(*frozen),
        _ => None,
    };

    let mut pos = initial.to_vec();
    let mut log_w = vec![0.0; n];
    let (mut u_cur, mut gx_cur) = models::potentials_and_grads_x(&*model, &pos)?;
    let mut u_frozen = match frozen {
        Some(f) => Some(models::potentials(f, &pos)?),
        None => None,
    };
    let mut next = vec![0.0; n * d];
    let mut u_next = vec![0.0; n];
    let mut gx_next = vec![0.0; n * d];

    for k in 0..config.k_outer {
        if state.out_of_time(config) {
            break;
        }
        let weights = normalize_weights(&log_w)?;
        let est = estimate(objective, &*model, &pos, &weights, Some(&u_cur), u_frozen.as_deref(), config, &streams, k)?;
        state.update(model, &est, objective.descent_sign())?;

        let kernel = UlaKernel::new(adapter.gamma, config.sigma_noise)?;
        for j in 0..config.k_inner {
            let counter = (k * config.k_inner + j) as u64;
            propagate(&pos, &gx_cur, &kernel, &streams, counter, d, &mut next);
            model.potential_and_grad_x_rows(&next, &mut u_next, &mut gx_next);
            crate::error::ensure_finite(&u_next, "potential after ULA move")?;
            let increments = par::map_indexed(n, |i| {
                let r = i * d..(i + 1) * d;
                log_weight_from(
                    PointEval {
                        u: u_cur[i],
                        grad: &gx_cur[r.clone()],
                    },
                    PointEval {
                        u: u_next[i],
                        grad: &gx_next[r.clone()],
                    },
                    &pos[r.clone()],
                    &next[r],
                    &kernel,
                )
            });
            crate::error::ensure_finite(&increments, "incremental log-weight")?;
            for (lw, inc) in log_w.iter_mut().zip(&increments) {
                *lw += inc;
            }
            std::mem::swap(&mut pos, &mut next);
            std::mem::swap(&mut u_cur, &mut u_next);
            std::mem::swap(&mut gx_cur, &mut gx_next);
        }
        if let Some(f) = frozen {
            u_frozen = Some(models::potentials(f, &pos)?);
        }

        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        log_w.iter_mut().for_each(|lw| *lw -= max);
        let new_weights = normalize_weights(&log_w)?;
        let new_ess = new_weights.ess();
        let gamma_used = adapter.gamma;
        if config.adapt_gamma {
            adapter.adapt(new_ess, n);
        }
        let resampled = new_ess < config.tau_resample * n as f64;
        if resampled {
            let mut rng = streams.stream("resampling", k as u64);
            let idx = resample_indices(&new_weights, n, &mut rng)?;
            pos = gather(&pos, d, &idx);
            gx_cur = gather(&gx_cur, d, &idx);
            u_cur = gather(&u_cur, 1, &idx);
            u_frozen = u_frozen.map(|u| gather(&u, 1, &idx));
            log_w.iter_mut().for_each(|lw| *lw = 0.0);
        }

        let row = TraceRow {
            k,
            particle_reward: est.particle_reward,
            ess: est.ess,
            gamma: gamma_used,
            grad_norm: est.norm(),
            resampled,
            wall_clock_s: None,
            fresh_reward: None,
            kl_quadrature: None,
        };
        state.record(config, k, &*model, row)?;
    }
    Ok(adapter.gamma)
}

fn gather(values: &[f64], width: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &a in idx {
        out.extend_from_slice(&values[a * width..(a + 1) * width]);
    }
    out
}

/// ImpDiff: the same persistent particles with uniform weights, no weight
/// accumulation and no resampling.
pub fn impdiff_run<M: GibbsModel + Clone>(
    config: &TuningConfig,
    model: M,
    objective: &Objective<'_, M>,
    initial: &[f64],
    checkpoint: Option<&mut CheckpointFn<'_, M>>,
) -> TuningResult<M> {
    let mut model = model;
    let mut state = match LoopState::new(config, &model, checkpoint) {
        Ok(s) => s,
        Err(error) => return Err(TuningFailure { error, trace: TuningTrace::default() }),
    };
    match impdiff_inner(config, &mut model, objective, initial, &mut state) {
        Ok(gamma) => Ok(TuningOutcome {
            model,
            trace: state.trace,
            final_gamma: gamma,
        }),
        Err(error) => Err(TuningFailure { error, trace: state.trace }),
    }
}

fn impdiff_inner<M: GibbsModel + Clone>(
    config: &TuningConfig,
    model: &mut M,
    objective: &Objective<'_, M>,
    initial: &[f64],
    state: &mut LoopState<'_, '_, M>,
) -> Result<f64> {
    let n = config.n_particles;
    let d = model.dim();
    check_initial(config, d, initial, n)?;
    let streams = RngStreams::new(config.seed);
    let kernel = UlaKernel::new(config.gamma0, config.sigma_noise)?;
    let weights = WeightVector::uniform(n);
    let mut pos = initial.to_vec();
    let mut next = vec![0.0; n * d];

    for k in 0..config.k_outer {
        if state.out_of_time(config) {
            break;
        }
        let (u_cur, mut gx_cur) = models::potentials_and_grads_x(&*model, &pos)?;
        let est = estimate(objective, &*model, &pos, &weights, Some(&u_cur), None, config, &streams, k)?;
        let prev_model = (config.k_inner > 1).then(|| model.clone());
        state.update(model, &est, objective.descent_sign())?;
        for j in 0..config.k_inner {
            if let (true, Some(m)) = (j > 0, prev_model.as_ref()) {
                gx_cur = models::potentials_and_grads_x(m, &pos)?.1;
            }
            let counter = (k * config.k_inner + j) as u64;
            propagate(&pos, &gx_cur, &kernel, &streams, counter, d, &mut next);
            crate::error::ensure_finite(&next, "particle coordinate")?;
            std::mem::swap(&mut pos, &mut next);
        }
        let row = TraceRow {
            k,
            particle_reward: est.particle_reward,
            ess: n as f64,
            gamma: kernel.gamma,
            grad_norm: est.norm(),
            resampled: false,
            wall_clock_s: None,
            fresh_reward: None,
            kl_quadrature: None,
        };
        state.record(config, k, &*model, row)?;
    }
    Ok(kernel.gamma)
}

/// SOUL: one persistent chain run for `N` ULA steps under `θ_k` per outer
/// iteration; the gradient averages the last `N/2` states.
///
/// `initial` is the starting state of the chain (one row).
pub fn soul_run<M: GibbsModel + Clone>(
    config: &TuningConfig,
    model: M,
    objective: &Objective<'_, M>,
    initial: &[f64],
    checkpoint: Option<&mut CheckpointFn<'_, M>>,
) -> TuningResult<M> {
    let mut model = model;
    let mut state = match LoopState::new(config, &model, checkpoint) {
        Ok(s) => s,
        Err(error) => return Err(TuningFailure { error, trace: TuningTrace::default() }),
    };
    match soul_inner(config, &mut model, objective, initial, &mut state) {
        Ok(gamma) => Ok(TuningOutcome {
            model,
            trace: state.trace,
            final_gamma: gamma,
        }),
        Err(error) => Err(TuningFailure { error, trace: state.trace }),
    }
}

fn soul_inner<M: GibbsModel + Clone>(
    config: &TuningConfig,
    model: &mut M,
    objective: &Objective<'_, M>,
    initial: &[f64],
    state: &mut LoopState<'_, '_, M>,
) -> Result<f64> {
    let n = config.n_particles;
    if n % 2 != 0 {
        return Err(config_err(format!("SOUL needs an even chain length, got {n}")));
    }
    let d = model.dim();
    check_initial(config, d, initial, 1)?;
    let streams = RngStreams::new(config.seed);
    let kernel = UlaKernel::new(config.gamma0, config.sigma_noise)?;
    let burn = n / 2;
    let weights = WeightVector::uniform(n - burn);
    let mut x = initial.to_vec();
    let mut grad = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut chain = vec![0.0; n * d];

    for k in 0..config.k_outer {
        if state.out_of_time(config) {
            break;
        }
        let mut rng = streams.stream("chain", k as u64);
        for t in 0..n {
            model.potential_and_grad_x(&x, &mut grad);
            fill_standard_normal(&mut rng, &mut noise);
            let out = &mut chain[t * d..(t + 1) * d];
            ula_step(&x, &grad, &kernel, &noise, out);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { chain: 0, step: t });
            }
            x.copy_from_slice(out);
        }
        let kept = &chain[burn * d..];
        let est = estimate(objective, &*model, kept, &weights, None, None, config, &streams, k)?;
        state.update(model, &est, objective.descent_sign())?;
        let row = TraceRow {
            k,
            particle_reward: est.particle_reward,
            ess: (n - burn) as f64,
            gamma: kernel.gamma,
            grad_norm: est.norm(),
            resampled: false,
            wall_clock_s: None,
            fresh_reward: None,
            kl_quadrature: None,
        };
        state.record(config, k, &*model, row)?;
    }
    Ok(kernel.gamma)
}
