use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};

use sosmc::checks::run_checks;
use sosmc::diagnostics::{
    fresh_reward, kl_quadrature, langevin_samples, quadrature_reward, tilted_optimum, FreshEvalConfig, QuadratureGrid,
};
use sosmc::models::{sample_exact, AnyModel, GaussianLocation, GibbsModel, MixturePotential, MlpEnergy};
use sosmc::optim::{CheckpointValues, Method, Objective, OptimizerSpec, TuningConfig, TuningOutcome};
use sosmc::pretrain::{desk_architecture, generate_dataset, paper_architecture, pcd_train, Dataset2D, DatasetKind, PcdConfig, S_SCALE};
use sosmc::rewards::Reward;
use sosmc::rng::RngStreams;

use crate::config::{output_dir, resolve};
use crate::manifest::{params_digest, Recorder};
use crate::{CheckArgs, Common, DatagenArgs, EvaluateArgs, PretrainArgs, TuneArgs};

fn kind_name(model: &AnyModel) -> &'static str {
    match model {
        AnyModel::Gaussian(_) => "gaussian_location",
        AnyModel::Mixture(_) => "mixture",
        AnyModel::Mlp(_) => "mlp",
    }
}

/// Quadrature grid for models of dimension 1 or 2.
fn grid_for(dim: usize) -> Option<QuadratureGrid> {
    match dim {
        1 => QuadratureGrid::cube(1, -6.0, 6.0, 4096).ok(),
        2 => Some(QuadratureGrid::default_2d()),
        _ => None,
    }
}

fn fresh_config(paper_scale: bool) -> FreshEvalConfig {
    if paper_scale {
        FreshEvalConfig::paper()
    } else {
        FreshEvalConfig::desk()
    }
}

pub fn datagen(c: &Common<DatagenArgs>) -> Result<ExitCode> {
    let (a, table) = resolve(&c.args, c.config.as_deref())?;
    let kind = DatasetKind::from_name(a.kind.as_deref().unwrap_or("two_moons"))?;
    let n = a.n.unwrap_or(20_000);
    if n < 2 {
        bail!("n must be at least 2, got {n}");
    }
    let seed = a.seed.unwrap_or(0);
    let mut rec = Recorder::new("datagen", output_dir(a.out.as_ref(), "datagen"), c.config.as_deref(), table)?;
    let data = generate_dataset(kind, n as usize, seed)?;
    data.write_csv(&rec.path("dataset.csv"))?;
    rec.record("dataset.csv");
    let effective = json!({
        "kind": kind.name(),
        "n": n,
        "seed": seed,
        "scale": S_SCALE,
        "raw_mean": data.raw_mean,
        "raw_std": data.raw_std,
    });
    let m = rec.finish(effective, vec![seed])?;
    println!("wrote {} rows to {}/dataset.csv", n, m.output_dir);
    Ok(ExitCode::SUCCESS)
}

pub fn pretrain(c: &Common<PretrainArgs>) -> Result<ExitCode> {
    let (a, table) = resolve(&c.args, c.config.as_deref())?;
    let data_path = a.data.clone().ok_or_else(|| anyhow!("--data is required"))?;
    if !data_path.is_file() {
        bail!("dataset {} does not exist", data_path.display());
    }
    let data = Dataset2D::read_csv(&data_path)?;
    let paper = a.paper_scale.unwrap_or(false);
    let mut cfg = if paper { PcdConfig::paper(500) } else { PcdConfig::desk() };
    let mut arch = if paper { paper_architecture() } else { desk_architecture() };
    match (a.epochs, a.steps) {
        (Some(_), Some(_)) => bail!("give either epochs or steps, not both"),
        (Some(e), None) => {
            cfg.epochs = e;
            cfg.steps = None;
        }
        (None, Some(s)) => cfg.steps = Some(s),
        (None, None) => {}
    }
    let seed = a.seed.unwrap_or(0);
    cfg.seed = seed;
    if let Some(w) = a.width {
        arch.hidden_width = w;
    }
    if let Some(l) = a.layers {
        arch.hidden_layers = l;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.learning_rate = lr;
    }
    if let Some(g) = a.grad_clip {
        cfg.optimizer.grad_clip_norm = Some(g);
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.buffer_size {
        cfg.buffer_size = v;
    }
    if let Some(v) = a.inner_steps {
        cfg.inner_steps = v;
    }
    if let Some(v) = a.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = a.reinjection {
        cfg.reinjection = v;
    }
    if let Some(v) = a.lambda_e {
        cfg.lambda_e = v;
    }
    if let Some(v) = a.lambda_gp {
        cfg.lambda_gp = v;
    }
    cfg.validate()?;
    let init_std = a.init_std.unwrap_or(0.02);

    let mut rec = Recorder::new("pretrain", output_dir(a.out.as_ref(), "pretrain"), c.config.as_deref(), table)?;
    rec.input(&data_path);
    let init = MlpEnergy::init(arch.clone(), init_std, &mut RngStreams::new(seed).stream("init", 0))?;
    AnyModel::Mlp(init.clone()).save(&rec.path("init_model.json"))?;
    rec.record("init_model.json");
    let mut model = init;
    let start = std::time::Instant::now();
    let report = pcd_train(&data, &mut model, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    AnyModel::Mlp(model.clone()).save(&rec.path("model.json"))?;
    rec.record("model.json");
    rec.write("loss.csv", report.loss_csv().as_bytes())?;
    rec.write_json(
        "summary.json",
        &json!({
            "steps": report.losses.len(),
            "final_loss": report.losses.last().map(|l| l.loss),
            "reinjected": report.reinjected,
            "negatives_drawn": report.negatives_drawn,
            "buffer_within_box": report.buffer.within_box(),
            "theta_sha256": params_digest(model.params()),
            "elapsed_s": elapsed,
        }),
    )?;
    let effective = json!({
        "pcd": cfg,
        "architecture": arch,
        "init_std": init_std,
        "paper_scale": paper,
        "n_data": data.len(),
    });
    let m = rec.finish(effective, vec![seed])?;
    println!(
        "trained {} steps in {:.1}s; model at {}/model.json",
        report.losses.len(),
        elapsed,
        m.output_dir
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_method(name: &str) -> Result<Method> {
    Ok(match name {
        "sosmc" => Method::Sosmc,
        "impdiff" => Method::Impdiff,
        "soul" => Method::Soul,
        other => bail!("unknown method {other:?} (sosmc, impdiff, soul)"),
    })
}

fn optimizer_spec(name: &str, lr: f64, clip: Option<f64>) -> Result<OptimizerSpec> {
    let spec = match name {
        "sgd" => OptimizerSpec::sgd(lr),
        "adam" => OptimizerSpec::adam(lr),
        other => bail!("unknown optimizer {other:?} (sgd, adam)"),
    };
    Ok(match clip {
        Some(c) => spec.with_clip(c),
        None => spec,
    })
}

fn starting_model(a: &TuneArgs) -> Result<(AnyModel, String)> {
    match (&a.model, &a.task) {
        (Some(_), Some(_)) => bail!("give either a model file or a task, not both"),
        (Some(path), None) => {
            let m = AnyModel::load(path).with_context(|| format!("loading model {}", path.display()))?;
            Ok((m, path.display().to_string()))
        }
        (None, task) => {
            let task = task.as_deref().unwrap_or("sparse");
            let m = match task {
                "gaussian" => AnyModel::Gaussian(GaussianLocation::isotropic(vec![0.0])),
                other => AnyModel::Mixture(MixturePotential::preset(other).map_err(|_| {
                    anyhow!("unknown task {other:?} (gaussian, dual, sparse)")
                })?),
            };
            Ok((m, task.to_string()))
        }
    }
}

fn default_reward(model: &AnyModel) -> &'static str {
    match model {
        AnyModel::Mlp(_) => "lower",
        _ if model.dim() < 2 => "right",
        _ => "hard_gated",
    }
}

/// Mass of `π_0` on the reward's half-plane, when the reward is an indicator.
fn indicator_mass(reward: &Reward, base: &AnyModel, grid: &QuadratureGrid) -> Result<Option<f64>> {
    match reward {
        Reward::HalfPlane { .. } => Ok(Some(quadrature_reward(base, reward, grid)?)),
        _ => Ok(None),
    }
}

pub fn tune(c: &Common<TuneArgs>) -> Result<ExitCode> {
    let (a, table) = resolve(&c.args, c.config.as_deref())?;
    let method = parse_method(a.method.as_deref().unwrap_or("sosmc"))?;
    let objective_name = a.objective.clone().unwrap_or_else(|| "reverse_kl".into());
    let (base, source) = starting_model(&a)?;
    let reward_name = a.reward.clone().unwrap_or_else(|| default_reward(&base).into());
    let reward = Reward::from_name(&reward_name)?;
    reward.check_dim(base.dim())?;
    let beta = a.beta.unwrap_or(0.1);
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let optimizer = optimizer_spec(
        a.optimizer.as_deref().unwrap_or("sgd"),
        a.lr.unwrap_or(0.1),
        a.grad_clip,
    )?;
    let mut cfg = TuningConfig::new(a.n.unwrap_or(1000), a.k.unwrap_or(1000), a.gamma0.unwrap_or(0.1), optimizer);
    cfg.k_inner = a.k_inner.unwrap_or(cfg.k_inner);
    cfg.sigma_noise = a.sigma_noise.unwrap_or(cfg.sigma_noise);
    cfg.tau_resample = a.tau_resample.unwrap_or(cfg.tau_resample);
    cfg.adapt_gamma = a.adapt_gamma.unwrap_or(false);
    cfg.tau_adapt = a.tau_adapt.unwrap_or(cfg.tau_adapt);
    cfg.adapt_factor = a.adapt_factor.unwrap_or(cfg.adapt_factor);
    cfg.reference_batch_size = a.reference_batch.unwrap_or(cfg.reference_batch_size);
    cfg.eval_every = a.eval_every.unwrap_or(0);
    cfg.wall_clock_budget_s = a.wall_clock_budget;
    cfg.validate()?;
    if method == Method::Soul && cfg.n_particles % 2 != 0 {
        bail!("invalid configuration: SOUL needs an even chain length, got {}", cfg.n_particles);
    }
    let fresh_cfg = fresh_config(a.paper_scale.unwrap_or(false));
    let with_timing = a.timing.unwrap_or(false);
    let init_burn_in = a.init_burn_in.unwrap_or(2000);

    let frozen = base.clone();
    let objective = match objective_name.as_str() {
        "reverse_kl" => Objective::ReverseKl {
            reward: &reward,
            beta_kl: beta,
            frozen: &frozen,
        },
        "forward_kl" => Objective::ForwardKl {
            reward: &reward,
            beta_kl: beta,
            reference: frozen.exact_sampler().ok_or_else(|| {
                anyhow!(
                    "invalid configuration: forward_kl needs a reference that can be sampled exactly; {} models cannot",
                    kind_name(&frozen)
                )
            })?,
        },
        other => bail!("unknown objective {other:?} (reverse_kl, forward_kl)"),
    };

    let mut rec = Recorder::new("tune", output_dir(a.out.as_ref(), "tune"), c.config.as_deref(), table)?;
    if let Some(p) = &a.model {
        rec.input(p);
    }
    let grid = grid_for(base.dim());
    let pi0_mass = match &grid {
        Some(g) => indicator_mass(&reward, &frozen, g)?,
        None => None,
    };
    let d = base.dim();
    let mut per_seed = Vec::new();
    for &seed in &seeds {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let rows = if method == Method::Soul { 1 } else { cfg.n_particles };
        let initial = match base.exact_sampler() {
            Some(s) => sample_exact(s, d, rows, &RngStreams::new(seed), "init", 0),
            None => {
                let init_cfg = FreshEvalConfig {
                    chains: rows,
                    burn_in: init_burn_in,
                    steps: 1,
                    ..fresh_cfg.clone()
                };
                langevin_samples(&base, &init_cfg, seed)?
            }
        };
        let mut hook = |_k: usize, m: &AnyModel| -> sosmc::Result<CheckpointValues> {
            let fresh = fresh_reward(m, &reward, &fresh_cfg, seed)?;
            let kl = match &grid {
                Some(g) if objective_name == "forward_kl" => Some(kl_quadrature(&frozen, m, g)?),
                Some(g) => Some(kl_quadrature(m, &frozen, g)?),
                None => None,
            };
            Ok(CheckpointValues {
                fresh_reward: Some(fresh),
                kl_quadrature: kl,
            })
        };
        let trace_name = format!("trace_seed{seed}.csv");
        let outcome = match method.run(&run_cfg, base.clone(), &objective, &initial, Some(&mut hook)) {
            Ok(o) => o,
            Err(f) => {
                rec.write(&trace_name, f.trace.to_csv(with_timing).as_bytes())?;
                return Err(anyhow!("seed {seed}: {f}"));
            }
        };
        rec.write(&trace_name, outcome.trace.to_csv(with_timing).as_bytes())?;
        rec.write(&format!("timing_seed{seed}.csv"), outcome.trace.timing_csv().as_bytes())?;
        outcome.model.save(&rec.path(&format!("model_seed{seed}.json")))?;
        rec.record(&format!("model_seed{seed}.json"));
        let summary = tune_summary(&outcome, &run_cfg, method, &objective_name, &reward, beta, &frozen, grid.as_ref(), pi0_mass)?;
        rec.write_json(&format!("summary_seed{seed}.json"), &summary)?;
        per_seed.push(summary);
    }
    let rewards: Vec<f64> = per_seed
        .iter()
        .filter_map(|s| s["terminal"]["particle_reward"].as_f64())
        .collect();
    let effective = json!({
        "method": method,
        "objective": objective_name,
        "source": source,
        "reward": reward,
        "beta": beta,
        "tuning": cfg,
        "fresh_eval": fresh_cfg,
        "init_burn_in": init_burn_in,
        "terminal_particle_reward": summary_stats(&rewards),
    });
    let m = rec.finish(effective, seeds.clone())?;
    for (seed, s) in seeds.iter().zip(&per_seed) {
        println!(
            "seed {seed}: particle reward {:.4}, final gamma {:.4e}",
            s["terminal"]["particle_reward"].as_f64().unwrap_or(f64::NAN),
            s["terminal"]["gamma"].as_f64().unwrap_or(f64::NAN)
        );
    }
    println!("outputs in {}", m.output_dir);
    Ok(ExitCode::SUCCESS)
}

fn summary_stats(values: &[f64]) -> Value {
    if values.is_empty() {
        return Value::Null;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    json!({ "mean": mean, "std": var.sqrt(), "count": values.len() })
}

#[allow(clippy::too_many_arguments)]
fn tune_summary(
    outcome: &TuningOutcome<AnyModel>,
    cfg: &TuningConfig,
    method: Method,
    objective: &str,
    reward: &Reward,
    beta: f64,
    frozen: &AnyModel,
    grid: Option<&QuadratureGrid>,
    pi0_mass: Option<f64>,
) -> Result<Value> {
    let last = outcome.trace.last();
    let last_fresh = outcome.trace.rows.iter().rev().find_map(|r| r.fresh_reward);
    let mut diagnostics = serde_json::Map::new();
    if let Some(g) = grid {
        diagnostics.insert("quadrature_reward".into(), json!(quadrature_reward(&outcome.model, reward, g)?));
        diagnostics.insert("reference_quadrature_reward".into(), json!(quadrature_reward(frozen, reward, g)?));
        let kl = if objective == "forward_kl" {
            kl_quadrature(frozen, &outcome.model, g)?
        } else {
            kl_quadrature(&outcome.model, frozen, g)?
        };
        diagnostics.insert("kl_quadrature".into(), json!(kl));
        if let (Some(mass), "reverse_kl") = (pi0_mass, objective) {
            diagnostics.insert("reference_mass".into(), json!(mass));
            diagnostics.insert("tilted_optimum".into(), json!(tilted_optimum(mass, beta)));
        }
    }
    Ok(json!({
        "method": method,
        "objective": objective,
        "reward": reward,
        "beta": beta,
        "seed": cfg.seed,
        "config": cfg,
        "model_kind": kind_name(&outcome.model),
        "num_params": outcome.model.num_params(),
        "theta_sha256": params_digest(outcome.model.params()),
        "theta": if outcome.model.num_params() <= 16 { json!(outcome.model.params()) } else { Value::Null },
        "terminal": {
            "iterations": outcome.trace.len(),
            "particle_reward": last.and_then(|r| r.particle_reward),
            "ess": last.map(|r| r.ess),
            "gamma": outcome.final_gamma,
            "grad_norm": last.map(|r| r.grad_norm),
            "resample_count": outcome.trace.resample_count(),
            "elapsed_s": outcome.trace.elapsed_s.last(),
            "fresh_reward": last_fresh,
        },
        "diagnostics": diagnostics,
    }))
}

pub fn evaluate(c: &Common<EvaluateArgs>) -> Result<ExitCode> {
    let (a, table) = resolve(&c.args, c.config.as_deref())?;
    let paths = a.model.clone().unwrap_or_default();
    if paths.is_empty() {
        bail!("--model is required");
    }
    let reward = Reward::from_name(a.reward.as_deref().unwrap_or("lower"))?;
    let seed = a.seed.unwrap_or(0);
    let beta = a.beta;
    let mut fresh_cfg = fresh_config(a.paper_scale.unwrap_or(false));
    fresh_cfg.chains = a.chains.unwrap_or(fresh_cfg.chains);
    fresh_cfg.burn_in = a.burn_in.unwrap_or(fresh_cfg.burn_in);
    fresh_cfg.steps = a.steps.unwrap_or(fresh_cfg.steps);
    fresh_cfg.validate()?;
    let mut rec = Recorder::new("evaluate", output_dir(a.out.as_ref(), "evaluate"), c.config.as_deref(), table)?;
    let reference = match &a.reference {
        Some(p) => {
            rec.input(p);
            Some(AnyModel::load(p).with_context(|| format!("loading reference {}", p.display()))?)
        }
        None => None,
    };
    let mut rows = Vec::new();
    for path in &paths {
        rec.input(path);
        let model = AnyModel::load(path).with_context(|| format!("loading model {}", path.display()))?;
        reward.check_dim(model.dim())?;
        let mut row = serde_json::Map::new();
        row.insert("model".into(), json!(path.display().to_string()));
        row.insert("theta_sha256".into(), json!(params_digest(model.params())));
        row.insert("fresh_reward".into(), json!(fresh_reward(&model, &reward, &fresh_cfg, seed)?));
        if let Some(g) = grid_for(model.dim()) {
            row.insert("quadrature_reward".into(), json!(quadrature_reward(&model, &reward, &g)?));
            if let Some(r) = &reference {
                row.insert("kl_to_reference".into(), json!(kl_quadrature(&model, r, &g)?));
            }
        }
        rows.push(Value::Object(row));
    }
    let mut diagnostics = serde_json::Map::new();
    if let Some(r) = &reference {
        if let Some(g) = grid_for(r.dim()) {
            if let Some(mass) = indicator_mass(&reward, r, &g)? {
                diagnostics.insert("reference_mass".into(), json!(mass));
                if let Some(b) = beta {
                    diagnostics.insert("tilted_optimum".into(), json!(tilted_optimum(mass, b)));
                }
            }
        }
    }
    rec.write_json(
        "evaluate.json",
        &json!({ "reward": reward, "seed": seed, "models": rows, "diagnostics": diagnostics }),
    )?;
    let effective = json!({ "reward": reward, "beta": beta, "fresh_eval": fresh_cfg });
    let m = rec.finish(effective, vec![seed])?;
    for row in &rows {
        println!(
            "{}: fresh reward {:.4}",
            row["model"].as_str().unwrap_or(""),
            row["fresh_reward"].as_f64().unwrap_or(f64::NAN)
        );
    }
    println!("report at {}/evaluate.json", m.output_dir);
    Ok(ExitCode::SUCCESS)
}

pub fn check(c: &Common<CheckArgs>) -> Result<ExitCode> {
    let (a, table) = resolve(&c.args, c.config.as_deref())?;
    let names = a.only.clone().unwrap_or_default();
    let seed = a.seed.unwrap_or(0);
    let mut rec = Recorder::new("check", output_dir(a.out.as_ref(), "check"), c.config.as_deref(), table)?;
    let outcomes = run_checks(&names, seed)?;
    let passed = outcomes.iter().all(|o| o.passed);
    for o in &outcomes {
        println!("{} {} ({:.2}s)", if o.passed { "PASS" } else { "FAIL" }, o.name, o.seconds);
    }
    rec.write_json("check_report.json", &json!({ "passed": passed, "seed": seed, "checks": outcomes }))?;
    rec.finish(json!({ "only": names }), vec![seed])?;
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
