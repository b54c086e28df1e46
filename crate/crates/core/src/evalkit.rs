//! Task runners for the three forecasting regimes, metrics, the
//! historical-average baseline, and the zero/few-shot protocol.
//!
//! Scoring happens on the normalized scale: predictions and ground truth
//! are both mapped with the same min-max statistics (observed-region
//! statistics for prediction tasks, whole-horizon truth statistics for
//! generation, where nothing is observed). The returned forecast grid is
//! denormalized back to raw units for downstream consumers.

use crate::context::context_tokens;
use crate::diffusion::{sample_latent, NoiseSchedule};
use crate::error::{CoreError, Result};
use crate::finetune::{finetune, FinetuneConfig, FreezePolicy};
use crate::grid_store::{denormalize, normalize, normalize_with, stats_over_steps, Grid, NormStats, PoiMap};
use crate::masking::{make_mask, Mask, MaskKind};
use crate::model::{UoMoModel, WindowSet};
use crate::tokenizer::{detokenize, embed, tokenize_centered, uncenter_values, TokenGrid};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ShortTerm,
    LongTerm,
    Generation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub t_obs: usize,
    pub t_pred: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, t_obs: usize, t_pred: usize) -> Result<Self> {
        let ok = match kind {
            TaskKind::ShortTerm => t_obs > t_pred && t_pred > 0,
            TaskKind::LongTerm => t_obs < t_pred && t_obs > 0,
            TaskKind::Generation => t_obs == 0 && t_pred > 0,
        };
        if !ok {
            return Err(CoreError::InvalidArgument(format!(
                "task {kind:?} with t_obs {t_obs}, t_pred {t_pred} violates its regime"
            )));
        }
        Ok(TaskSpec { kind, t_obs, t_pred })
    }

    /// Short-term split of a horizon: predict the last quarter from the
    /// first three (e.g. 16 of 64 from the previous 48).
    pub fn short_term(t: usize) -> Result<Self> {
        Self::new(TaskKind::ShortTerm, t * 3 / 4, t - t * 3 / 4)
    }

    /// Long-term split: predict the last three quarters from the first.
    pub fn long_term(t: usize) -> Result<Self> {
        Self::new(TaskKind::LongTerm, t / 4, t - t / 4)
    }

    pub fn generation(t: usize) -> Result<Self> {
        Self::new(TaskKind::Generation, 0, t)
    }

    pub fn horizon(&self) -> usize {
        self.t_obs + self.t_pred
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellScore {
    pub h: usize,
    pub v: usize,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub rmse: f64,
    pub mae: f64,
    /// Histogram divergence; reported for the generation task only.
    pub jsd: Option<f64>,
    pub per_cell: Vec<CellScore>,
    pub runtime_seconds: f64,
    /// How scores were computed (scale and scope conventions).
    pub scoring: String,
    pub seed: u64,
}

pub const JSD_BINS: usize = 50;

/// RMSE and MAE over the region marked true.
pub fn metric_rmse_mae(pred: &[f64], truth: &[f64], region: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.len() != region.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "metric over {} predictions, {} truths, {} region flags",
            pred.len(),
            truth.len(),
            region.len()
        )));
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if region[i] {
            let d = pred[i] - truth[i];
            se += d * d;
            ae += d.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::EmptyRegion("no scored positions".into()));
    }
    Ok(((se / n as f64).sqrt(), ae / n as f64))
}

/// Jensen-Shannon divergence between the value histograms of two sets,
/// natural log, equal-width bins on [0,1] with add-one smoothing.
pub fn metric_jsd(pred: &[f64], truth: &[f64], bins: usize) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(CoreError::EmptyRegion("jsd over empty input".into()));
    }
    if bins == 0 {
        return Err(CoreError::InvalidArgument("jsd needs at least one bin".into()));
    }
    let hist = |xs: &[f64]| -> Vec<f64> {
        let mut counts = vec![1.0f64; bins]; // add-one smoothing
        for &x in xs {
            let b = ((x.clamp(0.0, 1.0)) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        counts.into_iter().map(|c| c / total).collect()
    };
    let p = hist(pred);
    let q = hist(truth);
    let kl = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() } else { 0.0 })
            .sum::<f64>()
    };
    let m: Vec<f64> = p.iter().zip(&q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    Ok(0.5 * kl(&p, &m) + 0.5 * kl(&q, &m))
}

/// Model inputs assembled for one forecast; exposed so tests can verify
/// no ground truth leaks in from the predicted region.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    pub observation: crate::tensor::Tensor,
    pub context: Option<crate::tensor::Tensor>,
    pub mask: Mask,
    pub stats: NormStats,
}

/// Build the mask, normalization statistics, observation tokens, and
/// context tokens for a task. Reads nothing from the predicted region of
/// the traffic grid except through the all-zero target rows.
pub fn build_inputs(
    model: &UoMoModel,
    traffic: &Grid,
    users: Option<&Grid>,
    poi: Option<&PoiMap>,
    task: &TaskSpec,
    t_start: usize,
) -> Result<ModelInputs> {
    if task.horizon() != traffic.t {
        return Err(CoreError::InvalidArgument(format!(
            "task horizon {} vs grid horizon {}",
            task.horizon(),
            traffic.t
        )));
    }
    let spec = model.spec;
    spec.check_divides(traffic.h, traffic.v, traffic.t)?;
    if task.t_obs % spec.t0 != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "observed steps {} not aligned to token depth {}",
            task.t_obs, spec.t0
        )));
    }

    let dims = crate::tokenizer::TokenDims {
        hp: traffic.h / spec.h0,
        vp: traffic.v / spec.v0,
        tp: traffic.t / spec.t0,
    };
    let mask = match task.kind {
        TaskKind::ShortTerm => make_mask(&MaskKind::ShortTerm { observed_tokens: task.t_obs / spec.t0 }, dims)?,
        TaskKind::LongTerm => make_mask(&MaskKind::LongTerm { observed_tokens: task.t_obs / spec.t0 }, dims)?,
        TaskKind::Generation => {
            let cells: Vec<(usize, usize)> =
                (0..dims.hp).flat_map(|h| (0..dims.vp).map(move |v| (h, v))).collect();
            make_mask(&MaskKind::Generation { cells }, dims)?
        }
    };

    // Normalization must not see the predicted region: observed-region
    // statistics for prediction, a fixed unit range for generation.
    let stats = if task.t_obs > 0 {
        stats_over_steps(traffic, task.t_obs)
    } else {
        NormStats { min: 0.0, max: 1.0 }
    };
    let norm = normalize_with(traffic, stats);
    let tokens = tokenize_centered(&norm, &spec)?;
    let emb = embed(&tokens, &model.embed_traffic)?;
    let split = crate::masking::split(&emb, &mask)?;

    let context = match (&model.context, users.is_some() || poi.is_some()) {
        (Some(ctx), true) => {
            let users_n = users.map(|u| normalize(u).0);
            let timestamps: Vec<usize> = (t_start..t_start + traffic.t).collect();
            Some(context_tokens(ctx, users_n.as_ref(), poi, &timestamps, traffic.interval_minutes, &spec)?)
        }
        _ => None,
    };

    Ok(ModelInputs { observation: split.observation, context, mask, stats })
}

/// Score a raw-scale forecast against truth on the predicted region,
/// after normalizing both sides with the given statistics.
pub fn score_forecast(
    forecast: &Grid,
    truth: &Grid,
    task: &TaskSpec,
    stats: NormStats,
    seed: u64,
    runtime_seconds: f64,
) -> Result<EvalReport> {
    let fc_n = normalize_with(forecast, stats);
    let truth_n = normalize_with(truth, stats);
    let plane = truth.h * truth.v;
    let region: Vec<bool> = (0..truth.values.len()).map(|i| i / plane >= task.t_obs).collect();
    let (rmse, mae) = metric_rmse_mae(&fc_n.values, &truth_n.values, &region)?;

    let mut per_cell = Vec::with_capacity(plane);
    for h in 0..truth.h {
        for v in 0..truth.v {
            let pred: Vec<f64> = (task.t_obs..truth.t).map(|t| fc_n.at(h, v, t)).collect();
            let tr: Vec<f64> = (task.t_obs..truth.t).map(|t| truth_n.at(h, v, t)).collect();
            let all = vec![true; pred.len()];
            let (r, m) = metric_rmse_mae(&pred, &tr, &all)?;
            per_cell.push(CellScore { h, v, rmse: r, mae: m });
        }
    }

    let jsd = if task.kind == TaskKind::Generation {
        let pred: Vec<f64> = fc_n.values.iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        let tr: Vec<f64> = truth_n.values.iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        Some(metric_jsd(&pred, &tr, JSD_BINS)?)
    } else {
        None
    };

    Ok(EvalReport {
        task: task.kind,
        rmse,
        mae,
        jsd,
        per_cell,
        runtime_seconds,
        scoring: "normalized pointwise over the predicted region".into(),
        seed,
    })
}

/// Sampling chains averaged for point forecasts (the posterior-mean
/// read-out); the generation task keeps a single chain so the produced
/// distribution is not narrowed.
pub const DEFAULT_SAMPLE_CHAINS: usize = 8;

/// Run one forecasting task end to end: build inputs, sample the masked
/// region (averaging `chains` independent chains for prediction tasks),
/// decode and detokenize, splice the observed history back in,
/// denormalize, and score against truth on the predicted region only.
#[allow(clippy::too_many_arguments)]
pub fn run_task(
    model: &UoMoModel,
    sched: &NoiseSchedule,
    traffic: &Grid,
    users: Option<&Grid>,
    poi: Option<&PoiMap>,
    task: &TaskSpec,
    t_start: usize,
    seed: u64,
    chains: usize,
) -> Result<(Grid, EvalReport)> {
    let started = Instant::now();
    let inputs = build_inputs(model, traffic, users, poi, task, t_start)?;
    let spec = model.spec;

    let n_chains = match task.kind {
        TaskKind::Generation => 1,
        _ => chains.max(1),
    };
    let mut acc: Option<crate::tensor::Tensor> = None;
    for c in 0..n_chains {
        let e = sample_latent(
            &model.denoiser,
            &inputs.observation,
            &inputs.mask,
            inputs.context.as_ref(),
            sched,
            seed.wrapping_add(c as u64),
        )?;
        acc = Some(match acc {
            None => e,
            Some(a) => a.add(&e),
        });
    }
    let e0 = acc.expect("at least one chain").scale(1.0 / n_chains as f64);
    let decoded = crate::denoiser::decode_output(&model.denoiser, &e0)?;

    let dims = inputs.mask.dims;
    let token_grid = TokenGrid { dims, tokens: decoded };
    let mut decoded_grid = detokenize(&token_grid, &spec, traffic.kind, traffic.interval_minutes)?;
    uncenter_values(&mut decoded_grid.values);

    // Scoring scale: for prediction tasks the observed-region statistics
    // already used for the inputs; for generation (nothing observed, the
    // model worked in unit scale) the truth's own statistics, applied
    // strictly after the forecast is made.
    let scoring_stats = match task.kind {
        TaskKind::Generation => stats_over_steps(traffic, traffic.t),
        _ => inputs.stats,
    };

    // Observed steps keep the ground truth; predicted steps take the
    // decoded values, clamped into the normalized range.
    let norm_truth = normalize_with(traffic, scoring_stats);
    let mut spliced = norm_truth.clone();
    let plane = traffic.h * traffic.v;
    for i in 0..spliced.values.len() {
        if i / plane >= task.t_obs {
            spliced.values[i] = decoded_grid.values[i].clamp(0.0, 1.0);
        }
    }
    let mut forecast = denormalize(&spliced, scoring_stats);
    for x in forecast.values.iter_mut() {
        *x = x.max(0.0);
    }

    let report = score_forecast(&forecast, traffic, task, scoring_stats, seed, started.elapsed().as_secs_f64())?;
    Ok((forecast, report))
}

/// Historical-average baseline: each predicted step takes the mean of
/// observed values at the same time-of-day position when a full day fits
/// in the observation window, otherwise the mean of all observed values.
pub fn ha_baseline(grid: &Grid, task: &TaskSpec) -> Result<Grid> {
    if task.kind == TaskKind::Generation {
        return Err(CoreError::Unsupported("historical average requires history".into()));
    }
    if task.horizon() != grid.t {
        return Err(CoreError::InvalidArgument(format!(
            "task horizon {} vs grid horizon {}",
            task.horizon(),
            grid.t
        )));
    }
    let period = grid.steps_per_day();
    let mut out = grid.clone();
    for h in 0..grid.h {
        for v in 0..grid.v {
            let series = grid.cell_series(h, v);
            let observed = &series[..task.t_obs];
            let overall = observed.iter().sum::<f64>() / observed.len() as f64;
            for t in task.t_obs..grid.t {
                let value = if task.t_obs >= period {
                    let phase = t % period;
                    let same_phase: Vec<f64> = (0..task.t_obs)
                        .filter(|&s| s % period == phase)
                        .map(|s| series[s])
                        .collect();
                    if same_phase.is_empty() {
                        overall
                    } else {
                        same_phase.iter().sum::<f64>() / same_phase.len() as f64
                    }
                } else {
                    overall
                };
                out.set(h, v, t, value);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct FewshotOptions {
    /// 0 for zero-shot; otherwise the leading fraction of windows used
    /// for fine-tuning.
    pub fraction: f64,
    pub steps: usize,
    pub window_t: usize,
    pub seed: u64,
    pub chains: usize,
    /// Fine-tuning learning rate.
    pub lr: f64,
    /// First window evaluated. Defaults to the tuning prefix length;
    /// fraction sweeps set it to the largest prefix so every fraction
    /// scores on the same held-out tail.
    pub eval_start_window: Option<usize>,
}

/// Zero/few-shot protocol on an unseen city. Fraction 0 evaluates the
/// model untouched; a positive fraction fine-tunes a copy on the leading
/// windows and evaluates on the remainder (short-term task). Returns the
/// aggregate report over the held-out windows.
pub fn fewshot_protocol(
    model: &UoMoModel,
    sched: &NoiseSchedule,
    traffic: &Grid,
    users: Option<&Grid>,
    poi: Option<&PoiMap>,
    opts: &FewshotOptions,
) -> Result<EvalReport> {
    if !(0.0..=1.0).contains(&opts.fraction) {
        return Err(CoreError::InvalidArgument(format!("fraction {} outside [0,1]", opts.fraction)));
    }
    let started = Instant::now();
    let windows = WindowSet::build(traffic, users, model.spec, opts.window_t)?;
    let n_windows = windows.windows.len();
    let n_tune = (opts.fraction * n_windows as f64).floor() as usize;
    if n_tune >= n_windows {
        return Err(CoreError::InvalidArgument(format!(
            "fraction {} leaves no held-out window of {n_windows}",
            opts.fraction
        )));
    }

    let mut tuned = model.clone();
    if n_tune > 0 {
        let tune_t = n_tune * opts.window_t;
        let tune_traffic = traffic.window(0, tune_t)?;
        let tune_users = users.map(|u| u.window(0, tune_t)).transpose()?;
        let tune_set = WindowSet::build(&tune_traffic, tune_users.as_ref(), model.spec, opts.window_t)?;
        if tuned.context.is_some() && tune_set.windows.len() >= 2 {
            let cfg = FinetuneConfig {
                steps: opts.steps,
                batch_size: 4,
                lr: opts.lr,
                full_generation_masks: false,
                ..FinetuneConfig::default()
            };
            finetune(&mut tuned, &tune_set, poi, &cfg, &FreezePolicy::finetune_default(), sched, opts.seed)?;
        } else {
            let cfg = crate::diffusion::TrainConfig {
                steps: opts.steps,
                batch_size: 2.min(tune_set.windows.len()),
                lr: opts.lr,
                ..crate::diffusion::TrainConfig::default()
            };
            crate::diffusion::train(&mut tuned, &tune_set, sched, &cfg, opts.seed)?;
        }
    }

    // Evaluate short-term forecasts on the held-out windows.
    let eval_start = opts.eval_start_window.unwrap_or(n_tune).max(n_tune);
    if eval_start >= n_windows {
        return Err(CoreError::InvalidArgument(format!(
            "evaluation start window {eval_start} leaves nothing of {n_windows}"
        )));
    }
    let task = TaskSpec::short_term(opts.window_t)?;
    let mut rmse_sum = 0.0;
    let mut mae_sum = 0.0;
    let mut count = 0usize;
    let mut per_cell: Vec<CellScore> = Vec::new();
    for w in eval_start..n_windows {
        let t0 = w * opts.window_t;
        let tw = traffic.window(t0, opts.window_t)?;
        let uw = users.map(|u| u.window(t0, opts.window_t)).transpose()?;
        let (_, report) = run_task(
            &tuned,
            sched,
            &tw,
            uw.as_ref(),
            poi,
            &task,
            t0,
            opts.seed ^ (w as u64).wrapping_mul(0x9e37_79b9),
            opts.chains,
        )?;
        rmse_sum += report.rmse;
        mae_sum += report.mae;
        count += 1;
        if per_cell.is_empty() {
            per_cell = report.per_cell.clone();
        } else {
            for (acc, c) in per_cell.iter_mut().zip(&report.per_cell) {
                acc.rmse += c.rmse;
                acc.mae += c.mae;
            }
        }
    }
    if count == 0 {
        return Err(CoreError::EmptyRegion("no held-out windows".into()));
    }
    for c in per_cell.iter_mut() {
        c.rmse /= count as f64;
        c.mae /= count as f64;
    }
    Ok(EvalReport {
        task: task.kind,
        rmse: rmse_sum / count as f64,
        mae: mae_sum / count as f64,
        jsd: None,
        per_cell,
        runtime_seconds: started.elapsed().as_secs_f64(),
        scoring: format!("few-shot fraction {} over {count} held-out windows", opts.fraction),
        seed: opts.seed,
    })
}
