//! Subcommand implementations: each maps one pipeline onto a run
//! directory of artifacts.

use crate::config::RunConfig;
use crate::report::{markdown_summary, rows_to_csv, Row, ROWS_FILE};
use crate::runs::RunDir;
use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};

use uomo_core::denoiser::DenoiserConfig;
use uomo_core::diffusion::{train, ScheduleSpec, TrainConfig};
use uomo_core::evalkit::{fewshot_protocol, ha_baseline, run_task, score_forecast, EvalReport, FewshotOptions, TaskKind, TaskSpec};
use uomo_core::finetune::{finetune, ContrastiveConfig, FinetuneConfig, FreezePolicy};
use uomo_core::grid_store::{load_grid, load_poi, normalize, save_grid, save_poi, stats_over_steps, Grid, PoiMap, SynthConfig};
use uomo_core::model::{UoMoModel, WindowSet};
use uomo_core::netopt::{
    brute_force_deployment, deployment_instance_from_grid, deployment_value_under,
    poi_proportional_demand, sleep_instance_from_grid, sleep_objective, solve_deployment,
    solve_sleep, DeploymentSolution, SleepSolution,
};
use uomo_core::tokenizer::TokenSpec;

pub const TRAFFIC_FILE: &str = "city_traffic.grid";
pub const USERS_FILE: &str = "city_users.grid";
pub const POI_FILE: &str = "city_poi.poi";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const FINETUNED_FILE: &str = "finetuned.ckpt";

/// Demand scale: users per normalized traffic unit when forecasts feed
/// the optimizers.
const DEMAND_SCALE: f64 = 400.0;

pub fn token_spec(cfg: &RunConfig) -> Result<TokenSpec> {
    TokenSpec::new(cfg.h0, cfg.v0, cfg.t0, cfg.width).map_err(|e| anyhow!("{e}"))
}

fn window_tokens(cfg: &RunConfig) -> usize {
    (cfg.city_h / cfg.h0) * (cfg.city_v / cfg.v0) * (cfg.window_t / cfg.t0)
}

pub fn denoiser_config(cfg: &RunConfig) -> Result<DenoiserConfig> {
    DenoiserConfig::new(
        cfg.layers,
        cfg.width,
        cfg.heads,
        cfg.h0 * cfg.v0 * cfg.t0,
        window_tokens(cfg),
    )
    .map_err(|e| anyhow!("{e}"))
}

pub fn schedule_spec(cfg: &RunConfig) -> ScheduleSpec {
    ScheduleSpec {
        k: cfg.k_steps,
        beta_min: cfg.beta_min,
        beta_max: cfg.beta_max,
        literal_eq5: cfg.literal_eq5,
    }
}

pub fn task_spec(name: &str, window_t: usize) -> Result<TaskSpec> {
    let spec = match name {
        "short" => TaskSpec::short_term(window_t),
        "long" => TaskSpec::long_term(window_t),
        "gen" | "generation" => TaskSpec::generation(window_t),
        other => bail!("unknown task `{other}` (expected short|long|gen)"),
    };
    spec.map_err(|e| anyhow!("{e}"))
}


pub fn load_city(dir: &Path) -> Result<(Grid, Grid, PoiMap)> {
    let traffic = load_grid(&dir.join(TRAFFIC_FILE)).map_err(|e| anyhow!("{e}"))?;
    let users = load_grid(&dir.join(USERS_FILE)).map_err(|e| anyhow!("{e}"))?;
    let poi = load_poi(&dir.join(POI_FILE)).map_err(|e| anyhow!("{e}"))?;
    Ok((traffic, users, poi))
}

fn load_model(path: &Path) -> Result<(UoMoModel, ScheduleSpec)> {
    UoMoModel::load(path).map_err(|e| anyhow!("loading checkpoint {}: {e}", path.display()))
}

fn model_label(model: &UoMoModel) -> &'static str {
    if model.context.is_some() {
        "uomo"
    } else {
        "uomo-pretrain"
    }
}

/// Deterministic metric record (no wall-clock fields); `report.json`
/// keeps the full report including runtime.
#[derive(Serialize)]
struct MetricsRecord<'a> {
    city: &'a str,
    task: &'a str,
    model: &'a str,
    seed: u64,
    config_hash: String,
    rmse: f64,
    mae: f64,
    jsd: Option<f64>,
    scoring: &'a str,
}

fn write_eval_outputs(
    run: &RunDir,
    cfg: &RunConfig,
    model_name: &str,
    reports: &[(String, EvalReport)],
) -> Result<()> {
    let records: Vec<MetricsRecord> = reports
        .iter()
        .map(|(task, r)| MetricsRecord {
            city: &cfg.city_name,
            task,
            model: model_name,
            seed: cfg.seed,
            config_hash: format!("{:016x}", cfg.hash()),
            rmse: r.rmse,
            mae: r.mae,
            jsd: r.jsd,
            scoring: &r.scoring,
        })
        .collect();
    run.write_json("metrics.json", &records)?;
    run.write_json("report.json", &reports.iter().map(|(_, r)| r).collect::<Vec<_>>())?;

    let mut rows = Vec::new();
    for (task, r) in reports {
        rows.push(Row { city: cfg.city_name.clone(), task: task.clone(), model: model_name.into(), metric: "rmse".into(), value: r.rmse, seed: cfg.seed });
        rows.push(Row { city: cfg.city_name.clone(), task: task.clone(), model: model_name.into(), metric: "mae".into(), value: r.mae, seed: cfg.seed });
        if let Some(jsd) = r.jsd {
            rows.push(Row { city: cfg.city_name.clone(), task: task.clone(), model: model_name.into(), metric: "jsd".into(), value: jsd, seed: cfg.seed });
        }
    }
    run.write_string(ROWS_FILE, &rows_to_csv(&rows))
}

pub fn cmd_synth(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let run = RunDir::create(cfg, "synth", out)?;
    let synth_cfg = SynthConfig {
        phase_shift_hours: cfg.phase_shift_hours,
        ..SynthConfig::new(cfg.seed, cfg.city_h, cfg.city_v, cfg.city_t, cfg.interval_minutes)
    };
    let (traffic, users, poi) = uomo_core::grid_store::synth_city_with(&synth_cfg).map_err(|e| anyhow!("{e}"))?;
    save_grid(&traffic, &run.file(TRAFFIC_FILE)).map_err(|e| anyhow!("{e}"))?;
    save_grid(&users, &run.file(USERS_FILE)).map_err(|e| anyhow!("{e}"))?;
    save_poi(&poi, &run.file(POI_FILE)).map_err(|e| anyhow!("{e}"))?;
    println!("synth: city {}x{}x{} written to {}", cfg.city_h, cfg.city_v, cfg.city_t, run.path.display());
    Ok(run.path)
}

fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let run = RunDir::create(cfg, "train", out)?;
    let (traffic, _, _) = load_city(data)?;
    let spec = token_spec(cfg)?;

    // Pretraining wants diversity: pool the data city with further
    // synthetic cities of the same shape, seeded off the run seed.
    let mut cities: Vec<(Grid, Option<Grid>)> = vec![(traffic, None)];
    for i in 1..cfg.train_cities.max(1) {
        let synth_cfg = SynthConfig {
            phase_shift_hours: cfg.phase_shift_hours,
            ..SynthConfig::new(
                cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64),
                cfg.city_h,
                cfg.city_v,
                cfg.city_t,
                cfg.interval_minutes,
            )
        };
        let (t, _, _) = uomo_core::grid_store::synth_city_with(&synth_cfg).map_err(|e| anyhow!("{e}"))?;
        cities.push((t, None));
    }
    let windows = WindowSet::build_multi(&cities, spec, cfg.window_t).map_err(|e| anyhow!("{e}"))?;
    let mut model = UoMoModel::init(spec, denoiser_config(cfg)?, cfg.seed).map_err(|e| anyhow!("{e}"))?;
    let sched_spec = schedule_spec(cfg);
    let (sched, mode) = sched_spec.build().map_err(|e| anyhow!("{e}"))?;
    let train_cfg = TrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        mask_ratio: cfg.mask_ratio,
        mode,
        recon_weight: cfg.recon_weight,
    };
    let trace = train(&mut model, &windows, &sched, &train_cfg, cfg.seed).map_err(|e| anyhow!("{e}"))?;
    model.save(&sched_spec, &run.file(CHECKPOINT_FILE)).map_err(|e| anyhow!("{e}"))?;
    run.write_string("loss_trace.csv", &trace_csv(&trace))?;
    println!(
        "train: {} steps, loss {} -> {}, checkpoint at {}",
        trace.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        run.file(CHECKPOINT_FILE).display()
    );
    Ok(run.path)
}

pub fn cmd_finetune(cfg: &RunConfig, data: &Path, ckpt: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let run = RunDir::create(cfg, "finetune", out)?;
    let (traffic, users, poi) = load_city(data)?;
    let (mut model, sched_spec) = load_model(ckpt)?;
    if model.context.is_none() {
        model.attach_context(cfg.context_d, cfg.seed);
    }
    let windows = WindowSet::build(&traffic, Some(&users), model.spec, cfg.window_t).map_err(|e| anyhow!("{e}"))?;
    let (sched, mode) = sched_spec.build().map_err(|e| anyhow!("{e}"))?;
    let ft_cfg = FinetuneConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        mask_ratio: cfg.mask_ratio,
        contrastive: ContrastiveConfig { n_neg: cfg.n_neg, lambda: cfg.effective_lambda(), clamp: cfg.clamp },
        mode,
    };
    let policy = FreezePolicy::from_name(&cfg.freeze).map_err(|e| anyhow!("{e}"))?;
    let trace = finetune(&mut model, &windows, Some(&poi), &ft_cfg, &policy, &sched, cfg.seed)
        .map_err(|e| anyhow!("{e}"))?;
    model.save(&sched_spec, &run.file(FINETUNED_FILE)).map_err(|e| anyhow!("{e}"))?;
    run.write_string("finetune_trace.csv", &trace_csv(&trace))?;
    println!(
        "finetune: {} steps, loss {} -> {}, checkpoint at {}",
        trace.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        run.file(FINETUNED_FILE).display()
    );
    Ok(run.path)
}

/// The evaluation slice: the last full window of the city.
fn eval_window(cfg: &RunConfig, traffic: &Grid, users: &Grid) -> Result<(Grid, Grid, usize)> {
    if traffic.t < cfg.window_t {
        bail!("city horizon {} shorter than window {}", traffic.t, cfg.window_t);
    }
    let count = traffic.t / cfg.window_t;
    let t_start = (count - 1) * cfg.window_t;
    let tw = traffic.window(t_start, cfg.window_t).map_err(|e| anyhow!("{e}"))?;
    let uw = users.window(t_start, cfg.window_t).map_err(|e| anyhow!("{e}"))?;
    Ok((tw, uw, t_start))
}

pub fn cmd_forecast(cfg: &RunConfig, data: &Path, ckpt: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let run = RunDir::create(cfg, "forecast", out)?;
    let (traffic, users, poi) = load_city(data)?;
    let (model, sched_spec) = load_model(ckpt)?;
    let (sched, _) = sched_spec.build().map_err(|e| anyhow!("{e}"))?;
    let task = task_spec(&cfg.task, cfg.window_t)?;
    let (tw, uw, t_start) = eval_window(cfg, &traffic, &users)?;
    let (forecast, report) = run_task(&model, &sched, &tw, Some(&uw), Some(&poi), &task, t_start, cfg.seed, cfg.sample_chains)
        .map_err(|e| anyhow!("{e}"))?;
    save_grid(&forecast, &run.file("forecast.grid")).map_err(|e| anyhow!("{e}"))?;
    write_eval_outputs(&run, cfg, model_label(&model), &[(cfg.task.clone(), report)])?;
    println!("forecast: task {} on window at t={} -> {}", cfg.task, t_start, run.path.display());
    Ok(run.path)
}

pub fn cmd_evaluate(cfg: &RunConfig, data: &Path, ckpt: &Path, fewshot: bool, out: Option<&Path>) -> Result<PathBuf> {
    let run = RunDir::create(cfg, "evaluate", out)?;
    let (traffic, users, poi) = load_city(data)?;
    let (model, sched_spec) = load_model(ckpt)?;
    let (sched, _) = sched_spec.build().map_err(|e| anyhow!("{e}"))?;

    if fewshot {
        let fractions: Vec<f64> = if cfg.fraction >= 0.0 { vec![cfg.fraction] } else { vec![0.0, 0.05, 0.10] };
        let mut reports = Vec::new();
        for &fraction in &fractions {
            let opts = FewshotOptions { fraction, steps: cfg.fewshot_steps, window_t: cfg.window_t, seed: cfg.seed, chains: cfg.sample_chains, lr: cfg.lr, eval_start_window: None };
            let report = fewshot_protocol(&model, &sched, &traffic, Some(&users), Some(&poi), &opts)
                .map_err(|e| anyhow!("{e}"))?;
            reports.push((format!("fewshot-{fraction}"), report));
        }
        write_eval_outputs(&run, cfg, model_label(&model), &reports)?;
        println!("evaluate: few-shot fractions {fractions:?} -> {}", run.path.display());
        return Ok(run.path);
    }

    let (tw, uw, t_start) = eval_window(cfg, &traffic, &users)?;
    let mut reports = Vec::new();
    let mut rows_extra = Vec::new();
    for name in ["short", "long", "gen"] {
        let task = task_spec(name, cfg.window_t)?;
        let (_, report) = run_task(&model, &sched, &tw, Some(&uw), Some(&poi), &task, t_start, cfg.seed, cfg.sample_chains)
            .map_err(|e| anyhow!("{e}"))?;
        reports.push((name.to_string(), report));

        if task.kind != TaskKind::Generation {
            let ha = ha_baseline(&tw, &task).map_err(|e| anyhow!("{e}"))?;
            let stats = stats_over_steps(&tw, task.t_obs);
            let ha_report = score_forecast(&ha, &tw, &task, stats, cfg.seed, 0.0).map_err(|e| anyhow!("{e}"))?;
            rows_extra.push(Row { city: cfg.city_name.clone(), task: name.into(), model: "ha".into(), metric: "rmse".into(), value: ha_report.rmse, seed: cfg.seed });
            rows_extra.push(Row { city: cfg.city_name.clone(), task: name.into(), model: "ha".into(), metric: "mae".into(), value: ha_report.mae, seed: cfg.seed });
        }
    }
    write_eval_outputs(&run, cfg, model_label(&model), &reports)?;
    // Append baseline rows to the rows file.
    let existing = std::fs::read_to_string(run.file(ROWS_FILE))?;
    let mut all = crate::report::parse_rows(&existing, &run.file(ROWS_FILE))?;
    all.extend(rows_extra);
    run.write_string(ROWS_FILE, &rows_to_csv(&all))?;
    println!("evaluate: short/long/gen + ha on window at t={} -> {}", t_start, run.path.display());
    Ok(run.path)
}

#[derive(Serialize)]
struct DeployArtifact {
    solver: &'static str,
    config_hash: String,
    stations: u32,
    capacity: f64,
    alpha: f64,
    beta: f64,
    relaxed: bool,
    demand_scale: f64,
    solution: DeploymentSolution,
    oracle_objective: f64,
    realized_objective_vs_truth: f64,
    poi_strategy_realized_objective: f64,
}

/// Normalized grid scaled to user counts for the optimizers.
fn demand_grid(grid: &Grid) -> Grid {
    let (norm, _) = normalize(grid);
    Grid { values: norm.values.iter().map(|&x| x * DEMAND_SCALE).collect(), ..norm.clone() }
}

pub fn cmd_optimize_deploy(cfg: &RunConfig, data: &Path, ckpt: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let run = RunDir::create(cfg, "optimize-deploy", out)?;
    let (traffic, users, poi) = load_city(data)?;
    let (model, sched_spec) = load_model(ckpt)?;
    let (sched, _) = sched_spec.build().map_err(|e| anyhow!("{e}"))?;

    // Demand estimation for an unseen region: the generation task over
    // the evaluation window, context only.
    let task = task_spec("gen", cfg.window_t)?;
    let (tw, uw, t_start) = eval_window(cfg, &traffic, &users)?;
    let (forecast, _) = run_task(&model, &sched, &tw, Some(&uw), Some(&poi), &task, t_start, cfg.seed, cfg.sample_chains)
        .map_err(|e| anyhow!("{e}"))?;

    let estimated = demand_grid(&forecast);
    let inst = deployment_instance_from_grid(&estimated, cfg.stations, cfg.station_capacity, cfg.dep_alpha, cfg.dep_beta, cfg.dep_relaxed);
    let solution = solve_deployment(&inst).map_err(|e| anyhow!("{e}"))?;
    let oracle = brute_force_deployment(&inst).map_err(|e| anyhow!("{e}"))?;

    let truth_inst = deployment_instance_from_grid(&demand_grid(&tw), cfg.stations, cfg.station_capacity, cfg.dep_alpha, cfg.dep_beta, cfg.dep_relaxed);
    let realized = deployment_value_under(&truth_inst, &solution.placement);

    let total_volume: f64 = estimated.values.iter().sum();
    let poi_demand = poi_proportional_demand(&poi, cfg.window_t, total_volume);
    let poi_inst = deployment_instance_from_grid(&poi_demand, cfg.stations, cfg.station_capacity, cfg.dep_alpha, cfg.dep_beta, cfg.dep_relaxed);
    let poi_solution = solve_deployment(&poi_inst).map_err(|e| anyhow!("{e}"))?;
    let poi_realized = deployment_value_under(&truth_inst, &poi_solution.placement);

    let artifact = DeployArtifact {
        solver: "exact-enumeration",
        config_hash: format!("{:016x}", cfg.hash()),
        stations: cfg.stations,
        capacity: cfg.station_capacity,
        alpha: cfg.dep_alpha,
        beta: cfg.dep_beta,
        relaxed: cfg.dep_relaxed,
        demand_scale: DEMAND_SCALE,
        solution,
        oracle_objective: oracle.objective,
        realized_objective_vs_truth: realized,
        poi_strategy_realized_objective: poi_realized,
    };
    run.write_json("deploy.json", &artifact)?;
    println!(
        "optimize-deploy: objective {} (realized vs truth {realized}) -> {}",
        artifact.solution.objective,
        run.path.display()
    );
    Ok(run.path)
}

#[derive(Serialize)]
struct SleepArtifact {
    solver: &'static str,
    config_hash: String,
    rru_capacity: f64,
    max_rru: u32,
    alpha_energy: f64,
    beta_energy: f64,
    initial_rru: u32,
    demand_scale: f64,
    solution: SleepSolution,
    realized_breakdown_vs_truth: (f64, f64, f64, f64),
}

pub fn cmd_optimize_sleep(cfg: &RunConfig, data: &Path, ckpt: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let run = RunDir::create(cfg, "optimize-sleep", out)?;
    let (traffic, users, poi) = load_city(data)?;
    let (model, sched_spec) = load_model(ckpt)?;
    let (sched, _) = sched_spec.build().map_err(|e| anyhow!("{e}"))?;

    // Long-horizon load estimate from limited history.
    let task = task_spec("long", cfg.window_t)?;
    let (tw, uw, t_start) = eval_window(cfg, &traffic, &users)?;
    let (forecast, _) = run_task(&model, &sched, &tw, Some(&uw), Some(&poi), &task, t_start, cfg.seed, cfg.sample_chains)
        .map_err(|e| anyhow!("{e}"))?;

    let loads = demand_grid(&forecast);
    let inst = sleep_instance_from_grid(&loads, cfg.rru_capacity, cfg.max_rru, cfg.alpha_energy, cfg.beta_energy, cfg.initial_rru, 1e-6);
    let solution = solve_sleep(&inst).map_err(|e| anyhow!("{e}"))?;

    let truth_inst = sleep_instance_from_grid(&demand_grid(&tw), cfg.rru_capacity, cfg.max_rru, cfg.alpha_energy, cfg.beta_energy, cfg.initial_rru, 1e-6);
    let realized = sleep_objective(&truth_inst, &solution.schedule).map_err(|e| anyhow!("{e}"))?;

    let artifact = SleepArtifact {
        solver: "per-cell-dp",
        config_hash: format!("{:016x}", cfg.hash()),
        rru_capacity: cfg.rru_capacity,
        max_rru: cfg.max_rru,
        alpha_energy: cfg.alpha_energy,
        beta_energy: cfg.beta_energy,
        initial_rru: cfg.initial_rru,
        demand_scale: DEMAND_SCALE,
        solution,
        realized_breakdown_vs_truth: realized,
    };
    run.write_json("sleep.json", &artifact)?;
    println!(
        "optimize-sleep: objective {} (realized vs truth {}) -> {}",
        artifact.solution.objective,
        realized.3,
        run.path.display()
    );
    Ok(run.path)
}

pub fn cmd_report(dirs: &[PathBuf], out: Option<&Path>) -> Result<PathBuf> {
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("report-out"));
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let (rows, missing) = crate::report::collect(dirs)?;
    for warning in &missing {
        eprintln!("warning: {warning}");
    }
    std::fs::write(out_dir.join("combined.csv"), rows_to_csv(&rows))?;
    std::fs::write(out_dir.join("summary.md"), markdown_summary(&rows))?;
    println!("report: {} rows from {} dirs -> {}", rows.len(), dirs.len(), out_dir.display());
    Ok(out_dir)
}
