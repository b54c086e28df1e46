//! Multi-thread vs single-thread timings for the data-parallel hot
//! paths: training steps, sampling, and the exact sleep enumeration.
//! With the `parallel` feature enabled (the default), each workload runs
//! under the default rayon pool and under a 1-thread pool; results are
//! bitwise identical either way, only the wall time differs. Without the
//! feature the code is inherently sequential and the comparison is moot.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use uomo_core::denoiser::DenoiserConfig;
use uomo_core::diffusion::{default_schedule, train, TrainConfig};
use uomo_core::evalkit::{run_task, TaskSpec};
use uomo_core::grid_store::synth_city;
use uomo_core::model::{UoMoModel, WindowSet};
use uomo_core::netopt::{brute_force_sleep, SleepInstance};
use uomo_core::tokenizer::TokenSpec;

fn fixture() -> (UoMoModel, WindowSet) {
    let (traffic, _, _) = synth_city(1, 8, 8, 128, 60).unwrap();
    let spec = TokenSpec::new(2, 2, 8, 16).unwrap();
    let cfg = DenoiserConfig::new(2, 16, 2, 32, 128).unwrap();
    let model = UoMoModel::init(spec, cfg, 2).unwrap();
    let ws = WindowSet::build(&traffic, None, spec, 64).unwrap();
    (model, ws)
}

fn sleep_fixture() -> SleepInstance {
    SleepInstance {
        cells: 2,
        horizon: 4,
        loads: (0..8).map(|i| 0.4 + 0.3 * i as f64).collect(),
        rru_capacity: 1.0,
        max_rru: 4,
        alpha_energy: 0.02,
        beta_energy: 0.1,
        initial_rru: 4,
    }
}

#[cfg(feature = "parallel")]
fn run_modes(c: &mut Criterion, name: &str, mut f: impl FnMut() + Send) {
    c.bench_function(&format!("{name}/threads=all"), |b| b.iter(&mut f));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    c.bench_function(&format!("{name}/threads=1"), |b| {
        b.iter(|| pool.install(|| f()))
    });
}

#[cfg(not(feature = "parallel"))]
fn run_modes(c: &mut Criterion, name: &str, mut f: impl FnMut()) {
    c.bench_function(&format!("{name}/sequential"), |b| b.iter(&mut f));
}

fn bench_train_step(c: &mut Criterion) {
    let (model, ws) = fixture();
    let sched = default_schedule();
    let cfg = TrainConfig { steps: 1, batch_size: 4, ..TrainConfig::default() };
    run_modes(c, "train_step", move || {
        let mut m = model.clone();
        let trace = train(&mut m, &ws, &sched, &cfg, 7).unwrap();
        black_box(trace);
    });
}

fn bench_sampling(c: &mut Criterion) {
    let (model, _) = fixture();
    let sched = default_schedule();
    let (traffic, _, _) = synth_city(3, 8, 8, 64, 60).unwrap();
    let task = TaskSpec::short_term(64).unwrap();
    run_modes(c, "short_term_forecast", move || {
        let out = run_task(&model, &sched, &traffic, None, None, &task, 0, 11).unwrap();
        black_box(out.1.rmse);
    });
}

fn bench_sleep_enumeration(c: &mut Criterion) {
    let inst = sleep_fixture();
    run_modes(c, "sleep_brute_force", move || {
        let sol = brute_force_sleep(&inst).unwrap();
        black_box(sol.objective);
    });
}

criterion_group!(benches, bench_train_step, bench_sampling, bench_sleep_enumeration);
criterion_main!(benches);
