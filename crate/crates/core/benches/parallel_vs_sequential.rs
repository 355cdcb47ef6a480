use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cpn_core::datastore::Trajectory;
use cpn_core::harness::{run_trial, Controller};
use cpn_core::imitation::{all_samples, sample_gradient, Sample, TrainData};
use cpn_core::models::{Method, MethodConfig, Model};
use cpn_core::netblocks::{ConvEncoderSpec, ConvLayerSpec, ParamBundle};
use cpn_core::par;
use cpn_core::worlds::{generate_demos, TaskId, TaskSpec};

const SIZE: usize = 32;

fn spec(task: TaskId) -> TaskSpec {
    TaskSpec {
        render_size: SIZE,
        ..TaskSpec::new(task)
    }
}

fn model(method: Method) -> Model {
    let layer = ConvLayerSpec {
        channels: 8,
        kernel: 3,
        stride: 2,
    };
    let encoder = ConvEncoderSpec::for_size(SIZE, vec![layer, layer, layer], 32);
    Model::new(MethodConfig::new(method).with_encoder(encoder)).unwrap()
}

fn backends() -> Vec<(&'static str, bool)> {
    let mut b = vec![("sequential", false)];
    if cfg!(feature = "parallel") {
        b.push(("parallel", true));
    }
    b
}

fn map_with<T: Sync, R: Send>(
    parallel: bool,
    items: &[T],
    f: impl Fn(&T) -> R + Sync + Send,
) -> Vec<R> {
    #[cfg(feature = "parallel")]
    if parallel {
        return par::map_par(items, f);
    }
    let _ = parallel;
    par::map_seq(items, f)
}

fn batch_gradients(c: &mut Criterion) {
    let demos: Vec<Trajectory> = generate_demos(&spec(TaskId::Reach), 4, 1).unwrap();
    let data = TrainData::images(&demos);
    let batch: Vec<Sample> = all_samples(&demos).into_iter().take(32).collect();
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for method in [Method::Bc, Method::Cpn] {
        let m = model(method);
        let params: ParamBundle = m.init_params(0).unwrap();
        for (name, parallel) in backends() {
            group.bench_function(BenchmarkId::new(method.key(), name), |b| {
                b.iter(|| {
                    map_with(parallel, &batch, |s| {
                        sample_gradient(&m, &params, &data, *s, true).unwrap().loss
                    })
                })
            });
        }
    }
    group.finish();
}

fn eval_trials(c: &mut Criterion) {
    let m = model(Method::Upn);
    let params = m.init_params(0).unwrap();
    let s = TaskSpec {
        horizon: 100,
        ..spec(TaskId::Reach)
    };
    let seeds: Vec<u64> = (0..8).collect();
    let mut group = c.benchmark_group("eval_trials");
    group.sample_size(10);
    for (name, parallel) in backends() {
        group.bench_function(name, |b| {
            b.iter(|| {
                map_with(parallel, &seeds, |&seed| {
                    run_trial(
                        Controller::Trained {
                            model: &m,
                            params: &params,
                        },
                        &s,
                        seed,
                    )
                    .unwrap()
                    .success
                })
            })
        });
    }
    group.finish();
}

fn matrix_cells(c: &mut Criterion) {
    use cpn_core::imitation::{train, TrainConfig};
    let demos = generate_demos(&spec(TaskId::Button), 2, 3).unwrap();
    let cells: Vec<Method> = Method::ALL.to_vec();
    let cfg = TrainConfig {
        epochs: 1,
        samples_per_epoch: Some(16),
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("matrix_cells");
    group.sample_size(10);
    for (name, parallel) in backends() {
        group.bench_function(name, |b| {
            b.iter(|| {
                map_with(parallel, &cells, |&method| {
                    let m = model(method);
                    train(&m, None, &TrainData::images(&demos), &cfg)
                        .unwrap()
                        .1
                        .checksum
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, eval_trials, matrix_cells);
criterion_main!(benches);
