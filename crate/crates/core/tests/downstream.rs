//! Downstream pipeline checks: context-driven demand estimation feeding
//! the deployment solver, and transfer-harness consistency.

use uomo_core::denoiser::DenoiserConfig;
use uomo_core::diffusion::{default_schedule, train, TrainConfig};
use uomo_core::evalkit::{fewshot_protocol, run_task, FewshotOptions, TaskSpec};
use uomo_core::finetune::{finetune, ContrastiveConfig, FinetuneConfig, FreezePolicy};
use uomo_core::grid_store::{aggregate_cells, synth_city, Grid, GridKind, PoiMap};
use uomo_core::model::{UoMoModel, WindowSet};
use uomo_core::netopt::{deployment_instance_from_grid, deployment_value_under, solve_deployment};
use uomo_core::tokenizer::TokenSpec;

fn scaled_demand(grid: &Grid) -> Grid {
    let (norm, _) = uomo_core::grid_store::normalize(grid);
    Grid { values: norm.values.iter().map(|&x| x * 400.0).collect(), ..norm.clone() }
}

fn trained_context_model() -> UoMoModel {
    let sched = default_schedule();
    let spec = TokenSpec::new(2, 2, 8, 16).unwrap();
    let cities: Vec<_> = (0..16)
        .map(|i| {
            let (t, _, _) = synth_city(3000 + i, 8, 8, 64, 15).unwrap();
            (t, None)
        })
        .collect();
    let ws = WindowSet::build_multi(&cities, spec, 64).unwrap();
    let cfg_dn = DenoiserConfig::new(2, 16, 2, 32, 128).unwrap();
    let mut model = UoMoModel::init(spec, cfg_dn, 3001).unwrap();
    let cfg = TrainConfig { steps: 200, batch_size: 16, lr: 5e-3, ..TrainConfig::default() };
    train(&mut model, &ws, &sched, &cfg, 3001).unwrap();
    let (src_t, src_u, src_poi) = synth_city(3500, 8, 8, 64 * 8, 15).unwrap();
    model.attach_context(16, 3002);
    let src_ws = WindowSet::build(&src_t, Some(&src_u), spec, 64).unwrap();
    let ft = FinetuneConfig {
        steps: 400,
        batch_size: 4,
        lr: 2e-3,
        contrastive: ContrastiveConfig::with_default_lambda(2),
        ..FinetuneConfig::default()
    };
    finetune(&mut model, &src_ws, Some(&src_poi), &ft, &FreezePolicy::finetune_default(), &sched, 3003).unwrap();
    model
}

/// Deployment driven by the context-conditioned generation estimate:
/// the estimate responds to where the users actually are, so the
/// resulting placement serves concentrated demand better than a
/// placement computed from an uninformed (uniform) estimate.
///
/// Cities whose demand concentrates in a few hot areas make the
/// distinction sharp; both placements are judged against the truth.
#[test]
fn forecast_driven_deployment_beats_uninformed_estimate() {
    let sched = default_schedule();
    let model = trained_context_model();
    let task = TaskSpec::generation(64).unwrap();
    let (stations, capacity) = (6u32, 200.0);

    let mut wins = 0;
    let trials = 5;
    for s in 0..trials {
        // Hot-spot city: most user mass in a handful of cells.
        let (base_traffic, _, poi) = synth_city(4000 + s, 8, 8, 64, 15).unwrap();
        let mut traffic = Grid::zeros(GridKind::Traffic, 8, 8, 64, 15);
        let mut users = Grid::zeros(GridKind::Users, 8, 8, 64, 15);
        let hot = [(1usize, 1usize), (6, 2), (3, 6)];
        for t in 0..64 {
            for h in 0..8 {
                for v in 0..8 {
                    let boost = if hot.contains(&(h, v)) { 8.0 } else { 0.2 };
                    let x = base_traffic.at(h, v, t) * boost;
                    traffic.set(h, v, t, x);
                    users.set(h, v, t, 0.8 * x.powf(0.9));
                }
            }
        }

        // Demand estimate: mean of a few generation draws.
        let mut est: Option<Grid> = None;
        let draws = 4;
        for d in 0..draws {
            let (forecast, _) =
                run_task(&model, &sched, &traffic, Some(&users), Some(&poi), &task, 0, 60 + s * 10 + d, 1).unwrap();
            est = Some(match est {
                None => forecast,
                Some(mut acc) => {
                    for (a, b) in acc.values.iter_mut().zip(&forecast.values) {
                        *a += b;
                    }
                    acc
                }
            });
        }
        let mut est = est.unwrap();
        for x in est.values.iter_mut() {
            *x /= draws as f64;
        }
        let est_model = scaled_demand(&aggregate_cells(&est, 2, 2).unwrap());
        let est_uniform = Grid {
            values: vec![est_model.values.iter().sum::<f64>() / est_model.values.len() as f64; est_model.values.len()],
            ..est_model.clone()
        };

        let place = |est: &Grid| {
            let inst = deployment_instance_from_grid(est, stations, capacity, 0.1, 1.0, false);
            solve_deployment(&inst).unwrap().placement
        };
        let truth = scaled_demand(&aggregate_cells(&traffic, 2, 2).unwrap());
        let truth_inst = deployment_instance_from_grid(&truth, stations, capacity, 0.1, 1.0, false);
        let model_value = deployment_value_under(&truth_inst, &place(&est_model));
        let uniform_value = deployment_value_under(&truth_inst, &place(&est_uniform));
        println!("  city {s}: forecast-driven {model_value:.1} vs uninformed {uniform_value:.1}");
        if model_value >= uniform_value {
            wins += 1;
        }
    }
    assert!(
        wins >= trials - 1,
        "forecast-driven placement won only {wins}/{trials} paired comparisons"
    );
}

/// The generation estimate localizes demand: concentrating all user mass
/// on one cell moves the peak of the generated traffic to that cell.
#[test]
fn generation_estimate_localizes_context() {
    let sched = default_schedule();
    let model = trained_context_model();
    let task = TaskSpec::generation(64).unwrap();

    for (sh, sv) in [(1usize, 2usize), (6, 5)] {
        let mut users = Grid::zeros(GridKind::Users, 8, 8, 64, 15);
        for t in 0..64 {
            users.set(sh, sv, t, 50.0);
        }
        for x in users.values.iter_mut() {
            *x += 0.01;
        }
        let poi = PoiMap::zeros(8, 8);
        let flat_truth = Grid { values: vec![1.0; 8 * 8 * 64], ..Grid::zeros(GridKind::Traffic, 8, 8, 64, 15) };
        let (forecast, _) = run_task(&model, &sched, &flat_truth, Some(&users), Some(&poi), &task, 0, 99, 1).unwrap();
        let mut best = (0, 0, f64::NEG_INFINITY);
        for h in 0..8 {
            for v in 0..8 {
                let tot: f64 = (0..64).map(|t| forecast.at(h, v, t)).sum();
                if tot > best.2 {
                    best = (h, v, tot);
                }
            }
        }
        assert_eq!(
            (best.0, best.1),
            (sh, sv),
            "context spike at ({sh},{sv}) generated its peak at ({},{})",
            best.0,
            best.1
        );
    }
}

/// Pipeline shape: a generation forecast of an 8x8x64 window becomes a
/// 64-grid deployment instance over the full horizon, and injecting the
/// ground truth as the forecast reproduces the truth-based instance.
#[test]
fn demand_estimation_pipeline_shape() {
    let (traffic, _, _) = synth_city(5000, 8, 8, 64, 15).unwrap();
    let inst = deployment_instance_from_grid(&traffic, 8, 100.0, 0.1, 1.0, false);
    assert_eq!(inst.n_grids, 64);
    assert_eq!(inst.horizon, 64);
    inst.validate().unwrap();
    // Identity pathway: truth in, truth-based instance out.
    assert_eq!(inst.demand_at(9, 30), traffic.at(1, 1, 30));
}

/// Zero-shot evaluation on the model's own city agrees with a manual
/// per-window evaluation loop (protocol sanity, not model quality).
#[test]
fn zero_shot_matches_in_domain_evaluation() {
    let spec = TokenSpec::new(2, 2, 8, 12).unwrap();
    let cfg = DenoiserConfig::new(2, 12, 2, 32, 32).unwrap();
    let mut model = UoMoModel::init(spec, cfg, 6000).unwrap();
    model.attach_context(6, 6001);
    let sched = default_schedule();
    let (traffic, users, poi) = synth_city(6002, 4, 4, 64 * 6, 15).unwrap();

    let opts = FewshotOptions {
        fraction: 0.0,
        steps: 0,
        window_t: 64,
        seed: 6003,
        chains: 2,
        lr: 1e-3,
        eval_start_window: None,
    };
    let protocol = fewshot_protocol(&model, &sched, &traffic, Some(&users), Some(&poi), &opts).unwrap();

    let task = TaskSpec::short_term(64).unwrap();
    let mut manual = 0.0;
    for w in 0..6 {
        let t0 = w * 64;
        let tw = traffic.window(t0, 64).unwrap();
        let uw = users.window(t0, 64).unwrap();
        let (_, r) = run_task(&model, &sched, &tw, Some(&uw), Some(&poi), &task, t0, 7000 + w as u64, 2).unwrap();
        manual += r.rmse;
    }
    manual /= 6.0;
    let rel = (protocol.rmse - manual).abs() / manual;
    assert!(
        rel < 0.10,
        "protocol rmse {} vs manual {} differ by {:.1}%",
        protocol.rmse,
        manual,
        rel * 100.0
    );
}
