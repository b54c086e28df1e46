//! Scratch probe for training-quality experiments; run explicitly with
//! `cargo test --test probe_learning --release -- --ignored --nocapture`.

use uomo_core::denoiser::{decode_output, DenoiserConfig};
use uomo_core::diffusion::{sample_latent, train, NoiseSchedule, TrainConfig};
use uomo_core::evalkit::{build_inputs, ha_baseline, score_forecast, TaskSpec};
use uomo_core::grid_store::{denormalize, normalize_with, stats_over_steps, synth_city, GridKind};
use uomo_core::model::{UoMoModel, WindowSet};
use uomo_core::tokenizer::{detokenize, uncenter_values, TokenGrid, TokenSpec};

fn ensemble_forecast(
    model: &UoMoModel,
    sched: &NoiseSchedule,
    traffic: &uomo_core::grid_store::Grid,
    task: &TaskSpec,
    chains: u64,
    seed: u64,
) -> f64 {
    let spec = model.spec;
    let inputs = build_inputs(model, traffic, None, None, task, 0).unwrap();
    let mut acc: Option<uomo_core::Tensor> = None;
    for c in 0..chains {
        let e0 = sample_latent(&model.denoiser, &inputs.observation, &inputs.mask, None, sched, seed + c).unwrap();
        acc = Some(match acc {
            None => e0,
            Some(a) => a.add(&e0),
        });
    }
    let mean = acc.unwrap().scale(1.0 / chains as f64);
    let dec = decode_output(&model.denoiser, &mean).unwrap();
    let mut grid = detokenize(&TokenGrid { dims: inputs.mask.dims, tokens: dec }, &spec, GridKind::Traffic, 15).unwrap();
    uncenter_values(&mut grid.values);
    let norm_truth = normalize_with(traffic, inputs.stats);
    let mut spliced = norm_truth.clone();
    let plane = traffic.h * traffic.v;
    for i in 0..spliced.values.len() {
        if i / plane >= task.t_obs {
            spliced.values[i] = grid.values[i].clamp(0.0, 1.0);
        }
    }
    let forecast = denormalize(&spliced, inputs.stats);
    score_forecast(&forecast, traffic, task, inputs.stats, 0, 0.0).unwrap().rmse
}

fn acceptance_style(train_seed: u64, lr: f64, batch: usize, chains: u64, n_cities: usize, noise: f64, sched: &NoiseSchedule) -> (f64, f64) {
    let spec = TokenSpec::new(2, 2, 8, 16).unwrap();
    let make_city = |seed: u64| {
        let mut cfg = uomo_core::grid_store::SynthConfig::new(seed, 8, 8, 64, 15);
        cfg.noise_sd = noise;
        let (t, _, _) = uomo_core::grid_store::synth_city_with(&cfg).unwrap();
        t
    };
    let cities: Vec<_> = (0..n_cities)
        .map(|i| (make_city(train_seed * 1000 + i as u64), None))
        .collect();
    let ws = WindowSet::build_multi(&cities, spec, 64).unwrap();
    let cfg_dn = DenoiserConfig::new(2, 16, 2, 32, 128).unwrap();
    let mut model = UoMoModel::init(spec, cfg_dn, train_seed).unwrap();
    let cfg = TrainConfig { steps: 200, batch_size: batch, lr, ..TrainConfig::default() };
    let trace = train(&mut model, &ws, sched, &cfg, train_seed).unwrap();
    assert!(trace.last().unwrap() < &(0.5 * trace[0]), "loss not halved");

    let task = TaskSpec::short_term(64).unwrap();
    let (mut model_rmse, mut ha_rmse) = (0.0, 0.0);
    let evals = 3;
    for e in 0..evals {
        let mut cfg = uomo_core::grid_store::SynthConfig::new(train_seed * 1000 + 777 + e, 8, 8, 64, 15);
        cfg.noise_sd = noise;
        let (traffic, _, _) = uomo_core::grid_store::synth_city_with(&cfg).unwrap();
        model_rmse += ensemble_forecast(&model, sched, &traffic, &task, chains, 50 + e);
        let ha = ha_baseline(&traffic, &task).unwrap();
        let stats = stats_over_steps(&traffic, task.t_obs);
        ha_rmse += score_forecast(&ha, &traffic, &task, stats, 0, 0.0).unwrap().rmse;
    }
    let _ = synth_city;
    (model_rmse / evals as f64, ha_rmse / evals as f64)
}

#[test]
#[ignore]
fn probe_fewshot_monotonicity() {
    use uomo_core::evalkit::{fewshot_protocol, FewshotOptions};
    use uomo_core::finetune::{finetune, ContrastiveConfig, FinetuneConfig, FreezePolicy};
    let sched = uomo_core::diffusion::default_schedule();
    let spec = TokenSpec::new(2, 2, 8, 16).unwrap();

    let mut inversions = 0;
    for seed in 1..=5u64 {
        // Pretrain across cities.
        let cities: Vec<_> = (0..16)
            .map(|i| {
                let (t, _, _) = synth_city(seed * 1000 + i, 8, 8, 64, 15).unwrap();
                (t, None)
            })
            .collect();
        let ws = WindowSet::build_multi(&cities, spec, 64).unwrap();
        let cfg_dn = DenoiserConfig::new(2, 16, 2, 32, 128).unwrap();
        let mut model = UoMoModel::init(spec, cfg_dn, seed).unwrap();
        let cfg = TrainConfig { steps: 200, batch_size: 16, lr: 5e-3, ..TrainConfig::default() };
        train(&mut model, &ws, &sched, &cfg, seed).unwrap();

        // Contrastive fine-tune on a source city with context.
        let (src_t, src_u, src_poi) = synth_city(seed * 1000 + 500, 8, 8, 64 * 8, 15).unwrap();
        model.attach_context(16, seed);
        let src_ws = WindowSet::build(&src_t, Some(&src_u), spec, 64).unwrap();
        let ft = FinetuneConfig {
            steps: 200,
            batch_size: 4,
            lr: 2e-3,
            contrastive: ContrastiveConfig::with_default_lambda(2),
            ..FinetuneConfig::default()
        };
        finetune(&mut model, &src_ws, Some(&src_poi), &ft, &FreezePolicy::finetune_default(), &sched, seed).unwrap();

        // Transfer pair: new seed, shifted diurnal phase.
        let mut tgt_cfg = uomo_core::grid_store::SynthConfig::new(seed * 1000 + 900, 8, 8, 64 * 60, 15);
        tgt_cfg.phase_shift_hours = 6.0;
        let (tgt_t, tgt_u, tgt_poi) = uomo_core::grid_store::synth_city_with(&tgt_cfg).unwrap();

        let mut maes = Vec::new();
        let n_windows = 60usize;
        let common_tail = (0.10 * n_windows as f64).floor() as usize;
        for fraction in [0.0, 0.05, 0.10] {
            let tune_windows = (fraction * n_windows as f64).floor() as usize;
            let tuning_seeds: &[u64] = &[0, 1];
            let mut mae = 0.0;
            for &ts in tuning_seeds {
                let opts = FewshotOptions {
                    fraction,
                    steps: 30 * tune_windows,
                    window_t: 64,
                    seed: seed + ts * 7777,
                    chains: 8,
                    lr: 8e-4,
                    eval_start_window: Some(common_tail),
                };
                let report = fewshot_protocol(&model, &sched, &tgt_t, Some(&tgt_u), Some(&tgt_poi), &opts).unwrap();
                mae += report.mae;
            }
            maes.push(mae / tuning_seeds.len() as f64);
        }
        let inv = (maes[1] > maes[0]) as u32 + (maes[2] > maes[1]) as u32;
        inversions += inv;
        println!("seed {seed}: mae zero {:.4}  5% {:.4}  10% {:.4}  inversions {inv}", maes[0], maes[1], maes[2]);
    }
    println!("total adjacent inversions over 3 seeds: {inversions}");
}

#[test]
#[ignore]
fn probe_finetune_improves_over_pretrain() {
    use uomo_core::finetune::{finetune, ContrastiveConfig, FinetuneConfig, FreezePolicy};
    use uomo_core::evalkit::run_task;
    let sched = uomo_core::diffusion::default_schedule();
    let spec = TokenSpec::new(2, 2, 8, 16).unwrap();
    for seed in 1..=3u64 {
        let cities: Vec<_> = (0..16)
            .map(|i| {
                let (t, _, _) = synth_city(seed * 1000 + i, 8, 8, 64, 15).unwrap();
                (t, None)
            })
            .collect();
        let ws = WindowSet::build_multi(&cities, spec, 64).unwrap();
        let cfg_dn = DenoiserConfig::new(2, 16, 2, 32, 128).unwrap();
        let mut pretrained = UoMoModel::init(spec, cfg_dn, seed).unwrap();
        let cfg = TrainConfig { steps: 200, batch_size: 16, lr: 5e-3, ..TrainConfig::default() };
        train(&mut pretrained, &ws, &sched, &cfg, seed).unwrap();

        let (src_t, src_u, src_poi) = synth_city(seed * 1000 + 500, 8, 8, 64 * 8, 15).unwrap();
        let mut tuned = pretrained.clone();
        tuned.attach_context(16, seed);
        let src_ws = WindowSet::build(&src_t, Some(&src_u), spec, 64).unwrap();
        let ft = FinetuneConfig {
            steps: 200,
            batch_size: 4,
            lr: 2e-3,
            contrastive: ContrastiveConfig::with_default_lambda(2),
            ..FinetuneConfig::default()
        };
        finetune(&mut tuned, &src_ws, Some(&src_poi), &ft, &FreezePolicy::finetune_default(), &sched, seed).unwrap();

        // Held-out windows of the source city.
        let task = TaskSpec::short_term(64).unwrap();
        let (mut pre_rmse, mut ft_rmse) = (0.0, 0.0);
        let evals = 3;
        for e in 0..evals {
            let t0 = (5 + e) * 64;
            let tw = src_t.window(t0, 64).unwrap();
            let uw = src_u.window(t0, 64).unwrap();
            let (_, r_pre) = run_task(&pretrained, &sched, &tw, None, None, &task, t0, 31 + e as u64, 8).unwrap();
            let (_, r_ft) = run_task(&tuned, &sched, &tw, Some(&uw), Some(&src_poi), &task, t0, 31 + e as u64, 8).unwrap();
            pre_rmse += r_pre.rmse;
            ft_rmse += r_ft.rmse;
        }
        println!(
            "seed {seed}: pretrain rmse {:.4}  finetuned rmse {:.4}  improved={}",
            pre_rmse / evals as f64,
            ft_rmse / evals as f64,
            ft_rmse < pre_rmse
        );
    }
}

#[test]
#[ignore]
fn probe_multi_city_transfer() {
    let sched = uomo_core::diffusion::default_schedule();
    for (lr, batch, chains, n_cities, noise) in [
        (5e-3, 16usize, 16u64, 16usize, 0.15),
        (5e-3, 16, 24, 16, 0.15),
        (5e-3, 16, 16, 32, 0.15),
        (5e-3, 16, 16, 16, 0.10),
    ] {
        println!("lr={lr} batch={batch} chains={chains} cities={n_cities} noise={noise}");
        let mut wins = 0;
        for seed in 1..=5u64 {
            let (m, h) = acceptance_style(seed, lr, batch, chains, n_cities, noise, &sched);
            let win = m < h;
            wins += win as u32;
            println!("  seed {seed}: model {m:.4} ha {h:.4} win={win}");
        }
        println!("  wins {wins}/5");
    }
}
