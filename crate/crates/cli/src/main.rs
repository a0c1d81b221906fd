mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Stochastic optimisation with sequential Monte Carlo: dataset generation,
/// EBM pretraining, reward tuning, evaluation and numerical checks.
///
/// Every command accepts `--config FILE`, a flat TOML file whose keys are the
/// command's long flags with underscores; flags override the file. Outputs go
/// to `--out`, or to `$SOSMC_OUTPUT_ROOT/<command>` (default root `runs`).
#[derive(Parser, Debug)]
#[command(name = "sosmc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a standardised 2-d toy dataset to `dataset.csv`.
    Datagen(Common<DatagenArgs>),
    /// Train an MLP energy on a dataset with persistent contrastive divergence.
    Pretrain(Common<PretrainArgs>),
    /// Tune a model against a reward with SOSMC, ImpDiff or SOUL.
    Tune(Common<TuneArgs>),
    /// Fresh-chain and quadrature evaluation of one or more models.
    Evaluate(Common<EvaluateArgs>),
    /// Run the numerical self-checks and write a JSON report.
    Check(Common<CheckArgs>),
}

#[derive(Args, Debug)]
pub struct Common<T: Args> {
    /// Flat TOML config file; flags win over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub args: T,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenArgs {
    /// Dataset kind: two_moons, circles or blobs.
    #[arg(long)]
    pub kind: Option<String>,
    /// Number of points (at least 2).
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub n: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainArgs {
    /// Dataset CSV with header `x1,x2`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Full-size network and PCD constants instead of the desk defaults.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub paper_scale: Option<bool>,
    /// Train for this many epochs of `⌈N/B⌉` steps (overrides `steps`).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train for exactly this many optimisation steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Standard deviation of the initial weights.
    #[arg(long)]
    pub init_std: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub buffer_size: Option<usize>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub reinjection: Option<f64>,
    #[arg(long)]
    pub lambda_e: Option<f64>,
    #[arg(long)]
    pub lambda_gp: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneArgs {
    /// sosmc, impdiff or soul.
    #[arg(long)]
    pub method: Option<String>,
    /// reverse_kl or forward_kl.
    #[arg(long)]
    pub objective: Option<String>,
    /// Model JSON to tune (e.g. from `pretrain`); it is also the frozen reference.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Built-in starting model when no `--model` is given: gaussian, dual or sparse.
    #[arg(long)]
    pub task: Option<String>,
    /// Reward name: hard_gated, smooth_gated, multi_modal, left, right, lower, upper.
    #[arg(long)]
    pub reward: Option<String>,
    /// KL weight β.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Particles (SOSMC, ImpDiff) or chain length per iteration (SOUL).
    #[arg(long)]
    pub n: Option<usize>,
    /// Outer iterations.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k_inner: Option<usize>,
    /// Initial ULA step size.
    #[arg(long)]
    pub gamma0: Option<f64>,
    #[arg(long)]
    pub sigma_noise: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub tau_resample: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub adapt_gamma: Option<bool>,
    #[arg(long)]
    pub tau_adapt: Option<f64>,
    #[arg(long)]
    pub adapt_factor: Option<f64>,
    /// Comma-separated seeds; one trace per seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub reference_batch: Option<usize>,
    /// Fresh-reward and KL checkpoint period (0 disables).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Full-size fresh-reward chains at checkpoints.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub paper_scale: Option<bool>,
    /// Langevin burn-in for initial particles of models without an exact sampler.
    #[arg(long)]
    pub init_burn_in: Option<usize>,
    #[arg(long)]
    pub wall_clock_budget: Option<f64>,
    /// Also fill the `wall_clock_s` column of the trace.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub timing: Option<bool>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Model JSON files to evaluate (comma-separated or repeated).
    #[arg(long, value_delimiter = ',')]
    pub model: Option<Vec<PathBuf>>,
    /// Reference model for the KL and tilted-optimum columns.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub reward: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub paper_scale: Option<bool>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckArgs {
    /// Comma-separated subset of checks to run.
    #[arg(long, value_delimiter = ',')]
    pub only: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Datagen(c) => commands::datagen(c),
        Command::Pretrain(c) => commands::pretrain(c),
        Command::Tune(c) => commands::tune(c),
        Command::Evaluate(c) => commands::evaluate(c),
        Command::Check(c) => commands::check(c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
