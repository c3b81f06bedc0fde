use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedmutual::nn::{compute_gradients, forward, LossSpec, Mode};
use fedmutual::protocols::{local_train, mutual_update, predict};
use fedmutual::rng::stream;
use fedmutual::sim::run_simulation;
use fedmutual::{StrategyKind, StrategySpec};
use fedmutual_bench::{batch, config, model};

fn nn(c: &mut Criterion) {
    let params = model(8);
    let data = batch(256, 8);
    let x = data.features().view();
    c.bench_function("forward_eval_256", |b| {
        b.iter(|| forward(&params, x, Mode::Eval).unwrap())
    });
    c.bench_function("gradients_bce_256", |b| {
        b.iter(|| {
            compute_gradients(&params, x, data.labels(), &LossSpec::bce(), Mode::Eval).unwrap()
        })
    });
}

fn protocols(c: &mut Criterion) {
    let params = model(4);
    let data = batch(64, 4);
    let spec = StrategySpec::new(StrategyKind::DistributedMutualLearning);
    let cfg = spec.train_config(spec.local_epochs);
    c.bench_function("local_train_64x5", |b| {
        b.iter_batched(
            || params.clone(),
            |p| local_train(p, &data, &cfg, &mut stream(0, &[])).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let peer = predict(&model(4), data.features().view()).unwrap();
    let peers = vec![peer; 4];
    c.bench_function("mutual_update_64x5_4peers", |b| {
        b.iter_batched(
            || params.clone(),
            |p| mutual_update(p, &data, &peers, &spec, &mut stream(0, &[])).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulation_3_rounds");
    group.sample_size(10);
    for kind in [
        StrategyKind::Vanilla,
        StrategyKind::AsyncWeights,
        StrategyKind::DistributedMutualLearning,
    ] {
        let cfg = config(kind, 3);
        group.bench_function(kind.name(), |b| b.iter(|| run_simulation(&cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, nn, protocols, simulation);
criterion_main!(benches);
