//! Sequential vs rayon execution of the two batch-shaped workloads: validation
//! AP₅₀ and per-scene loss/gradient evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use specdistill::detector::{
    generate_scene, loss_and_grads, validation_ap50, DetectorParams, SceneConfig, SyntheticScene,
};
use specdistill::experiment::ExperimentConfig;
use specdistill::Execution;

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn setup() -> (DetectorParams, Vec<SyntheticScene>) {
    let cfg = ExperimentConfig::default();
    let params = DetectorParams::init(cfg.student_config(), 0);
    let scenes = (0..32)
        .map(|i| generate_scene(&SceneConfig::default(), 1000 + i))
        .collect();
    (params, scenes)
}

fn bench_batches(c: &mut Criterion) {
    let (params, scenes) = setup();

    let mut group = c.benchmark_group("validation_ap50");
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(exec), &exec, |b, &exec| {
            b.iter(|| validation_ap50(&params, &scenes, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("loss_and_grads");
    for exec in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(exec), &exec, |b, &exec| {
            b.iter(|| exec.map(&scenes, |s| loss_and_grads(&params, s).unwrap().0.total()))
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_batches
}
criterion_main!(benches);
