use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::models::{GibbsModel, MlpArchitecture, MlpEnergy};
use crate::optim::{OptState, OptimizerSpec};
use crate::par;
use crate::rng::{fill_standard_normal, RngStreams};

use super::datasets::Dataset2D;

/// One ULA move followed by a componentwise clamp to `[lo, hi]`, unit noise scale.
pub fn clamped_ula_step(x: &[f64], grad: &[f64], gamma: f64, lo: f64, hi: f64, noise: &[f64], out: &mut [f64]) {
    let s = (2.0 * gamma).sqrt();
    for (((o, xi), gi), ni) in out.iter_mut().zip(x).zip(grad).zip(noise) {
        *o = (xi - gamma * gi + s * ni).clamp(lo, hi);
    }
}

/// Persistent negative samples, all inside the clamp box.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    pub states: Vec<f64>,
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
}

impl ReplayBuffer {
    /// `m` states drawn uniformly on `[lo, hi]^dim`.
    pub fn uniform<R: Rng + ?Sized>(m: usize, dim: usize, lo: f64, hi: f64, rng: &mut R) -> Self {
        let states = (0..m * dim).map(|_| rng.random_range(lo..=hi)).collect();
        Self { states, dim, lo, hi }
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn within_box(&self) -> bool {
        self.states.iter().all(|v| (self.lo..=self.hi).contains(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcdConfig {
    pub buffer_size: usize,
    pub batch_size: usize,
    /// Fraction of each negative batch restarted from uniform noise.
    pub reinjection: f64,
    pub inner_steps: usize,
    pub step_size: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    pub lambda_e: f64,
    pub lambda_gp: f64,
    pub optimizer: OptimizerSpec,
    /// One epoch is `⌈N / B⌉` optimisation steps.
    pub epochs: usize,
    /// Overrides the epoch-derived step count when set.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl PcdConfig {
    /// Full-size settings for the given number of epochs.
    pub fn paper(epochs: usize) -> Self {
        Self {
            buffer_size: 20_000,
            batch_size: 512,
            reinjection: 0.05,
            inner_steps: 80,
            step_size: 5e-3,
            clamp_min: -6.0,
            clamp_max: 6.0,
            lambda_e: 1e-3,
            lambda_gp: 0.2,
            optimizer: OptimizerSpec::adam(2e-4).with_clip(10.0),
            epochs,
            steps: None,
            seed: 0,
        }
    }

    /// Reduced settings that train a small network on one core in minutes.
    pub fn desk() -> Self {
        Self {
            batch_size: 128,
            optimizer: OptimizerSpec::adam(2e-3).with_clip(10.0),
            steps: Some(2000),
            ..Self::paper(0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.buffer_size == 0 || self.batch_size == 0 {
            return Err(config_err("buffer and batch sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.reinjection) {
            return Err(config_err("reinjection fraction must lie in [0, 1]"));
        }
        if !(self.clamp_min < self.clamp_max) {
            return Err(config_err("clamp_min must be below clamp_max"));
        }
        if !(self.step_size > 0.0) {
            return Err(config_err("PCD step size must be positive"));
        }
        self.optimizer.validate()
    }

    pub fn steps_per_epoch(&self, n_data: usize) -> usize {
        n_data.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n_data: usize) -> usize {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(n_data))
    }
}

/// Architecture used with [`PcdConfig::paper`].
pub fn paper_architecture() -> MlpArchitecture {
    MlpArchitecture::new(2, 128, 4)
}

/// Architecture used with [`PcdConfig::desk`].
pub fn desk_architecture() -> MlpArchitecture {
    MlpArchitecture::new(2, 32, 2)
}

/// Loss terms of one PCD step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcdLoss {
    pub loss: f64,
    pub contrastive: f64,
    pub energy_pos: f64,
    pub energy_neg: f64,
    pub energy_reg: f64,
    pub grad_penalty: f64,
}

/// `L = mean E(x⁺) - mean E(x⁻) + λ_E (mean E(x⁺)² + mean E(x⁻)²) + λ_GP mean (‖∇_x E(x⁺)‖ - 1)²`
/// and its parameter gradient, with the negatives held fixed.
pub fn pcd_loss_and_grad(
    model: &MlpEnergy,
    positives: &[f64],
    negatives: &[f64],
    lambda_e: f64,
    lambda_gp: f64,
) -> Result<(PcdLoss, Vec<f64>)> {
    let d = model.dim();
    let p = model.num_params();
    let n_pos = positives.len() / d;
    let n_neg = negatives.len() / d;
    if n_pos == 0 || n_neg == 0 {
        return Err(config_err("PCD loss needs positive and negative samples"));
    }
    let (bp, bn) = (n_pos as f64, n_neg as f64);

    let pos = par::sum_vec_with(
        n_pos,
        p + 3,
        || (model.scratch(), vec![0.0; d]),
        |i, (s, gx), acc| {
            let x = &positives[i * d..(i + 1) * d];
            let e = model.energy_and_grad_x(x, gx, s);
            let norm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (theta_acc, stats) = acc.split_at_mut(p);
            model.forward(x, s);
            model.backward(s, (1.0 + 2.0 * lambda_e * e) / bp, Some(theta_acc), None);
            if norm > 0.0 {
                let v: Vec<f64> = gx.iter().map(|g| g / norm).collect();
                model.accumulate_directional_grad_theta(x, &v, 2.0 * lambda_gp * (norm - 1.0) / bp, theta_acc, s);
            }
            stats[0] += e;
            stats[1] += e * e;
            stats[2] += (norm - 1.0) * (norm - 1.0);
        },
    );
    let neg = par::sum_vec_with(
        n_neg,
        p + 2,
        || model.scratch(),
        |i, s, acc| {
            let x = &negatives[i * d..(i + 1) * d];
            let e = model.forward(x, s);
            let (theta_acc, stats) = acc.split_at_mut(p);
            model.backward(s, (-1.0 + 2.0 * lambda_e * e) / bn, Some(theta_acc), None);
            stats[0] += e;
            stats[1] += e * e;
        },
    );

    let energy_pos = pos[p] / bp;
    let energy_neg = neg[p] / bn;
    let energy_reg = pos[p + 1] / bp + neg[p + 1] / bn;
    let grad_penalty = pos[p + 2] / bp;
    let contrastive = energy_pos - energy_neg;
    let loss = contrastive + lambda_e * energy_reg + lambda_gp * grad_penalty;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "PCD loss",
            index: 0,
        });
    }
    let grad: Vec<f64> = pos[..p].iter().zip(&neg[..p]).map(|(a, b)| a + b).collect();
    Ok((
        PcdLoss {
            loss,
            contrastive,
            energy_pos,
            energy_neg,
            energy_reg,
            grad_penalty,
        },
        grad,
    ))
}

#[derive(Debug, Clone)]
pub struct PcdReport {
    pub losses: Vec<PcdLoss>,
    pub buffer: ReplayBuffer,
    /// Number of negative-chain initialisations drawn from fresh noise.
    pub reinjected: usize,
    pub negatives_drawn: usize,
}

impl PcdReport {
    pub fn loss_csv(&self) -> String {
        use crate::optim::trace::fmt_f64;
        let mut s = String::from("step,loss,contrastive,energy_pos,energy_neg,energy_reg,grad_penalty\n");
        for (t, l) in self.losses.iter().enumerate() {
            s.push_str(&format!(
                "{t},{},{},{},{},{},{}\n",
                fmt_f64(l.loss),
                fmt_f64(l.contrastive),
                fmt_f64(l.energy_pos),
                fmt_f64(l.energy_neg),
                fmt_f64(l.energy_reg),
                fmt_f64(l.grad_penalty)
            ));
        }
        s
    }
}

/// Runs `steps` clamped-ULA moves on every row of `states` under `model`.
pub fn run_clamped_chains(
    model: &MlpEnergy,
    states: &mut [f64],
    steps: usize,
    gamma: f64,
    lo: f64,
    hi: f64,
    streams: &RngStreams,
    name: &str,
    counter: u64,
) {
    let d = model.dim();
    par::for_each_block_mut(
        states,
        d,
        16,
        || (model.scratch(), vec![0.0; d], vec![0.0; d], vec![0.0; d]),
        |first, (s, g, noise, next), block| {
            for (r, x) in block.chunks_exact_mut(d).enumerate() {
                let mut rng = streams.lane(name, counter, (first + r) as u64);
                for _ in 0..steps {
                    model.energy_and_grad_x(x, g, s);
                    fill_standard_normal(&mut rng, noise);
                    clamped_ula_step(x, g, gamma, lo, hi, noise, next);
                    x.copy_from_slice(next);
                }
            }
        },
    );
}

/// Persistent contrastive divergence with a replay buffer and reinjection.
pub fn pcd_train(data: &Dataset2D, model: &mut MlpEnergy, config: &PcdConfig) -> Result<PcdReport> {
    config.validate()?;
    if model.dim() != 2 {
        return Err(Error::Dimension {
            expected: 2,
            got: model.dim(),
        });
    }
    let streams = RngStreams::new(config.seed);
    let (lo, hi) = (config.clamp_min, config.clamp_max);
    let mut buffer = ReplayBuffer::uniform(config.buffer_size, 2, lo, hi, &mut streams.stream("buffer_init", 0));
    let mut opt = OptState::new(config.optimizer.clone(), model.num_params())?;
    let mut theta = model.params().to_vec();

    let n = data.len();
    let per_epoch = config.steps_per_epoch(n);
    let total = config.total_steps(n);
    let b = config.batch_size;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(total);
    let mut reinjected = 0;
    let mut positives = Vec::with_capacity(2 * b);
    let mut negatives = vec![0.0; 2 * b];

    for t in 0..total {
        let (epoch, slot) = (t / per_epoch, t % per_epoch);
        if slot == 0 {
            perm = (0..n).collect();
            perm.shuffle(&mut streams.stream("data_shuffle", epoch as u64));
        }
        positives.clear();
        for &i in &perm[slot * b..((slot + 1) * b).min(n)] {
            positives.extend_from_slice(data.point(i));
        }

        let mut rng = streams.stream("buffer_index", t as u64);
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..buffer.len())).collect();
        let mut reinject_rng = streams.stream("reinjection", t as u64);
        for (j, &i) in idx.iter().enumerate() {
            let row = &mut negatives[2 * j..2 * j + 2];
            if reinject_rng.random::<f64>() < config.reinjection {
                reinjected += 1;
                for v in row.iter_mut() {
                    *v = reinject_rng.random_range(lo..=hi);
                }
            } else {
                row.copy_from_slice(buffer.state(i));
            }
        }

        run_clamped_chains(model, &mut negatives, config.inner_steps, config.step_size, lo, hi, &streams, "pcd_noise", t as u64);
        for (j, &i) in idx.iter().enumerate() {
            buffer.states[2 * i..2 * i + 2].copy_from_slice(&negatives[2 * j..2 * j + 2]);
        }

        let (loss, grad) = pcd_loss_and_grad(model, &positives, &negatives, config.lambda_e, config.lambda_gp)?;
        opt.step(&mut theta, &grad)?;
        model.set_params(&theta)?;
        losses.push(loss);
    }
    Ok(PcdReport {
        losses,
        buffer,
        reinjected,
        negatives_drawn: total * b,
    })
}
