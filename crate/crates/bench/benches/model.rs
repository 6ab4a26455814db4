use std::hint::black_box;

use chit_core::geometry::fronto_parallel_scene;
use chit_core::train::{predict, TrainConfig, Trainer};
use criterion::{criterion_group, criterion_main, Criterion};

fn toy(c: &mut Criterion) {
    let cfg = TrainConfig::toy();
    let scene = fronto_parallel_scene(0, &cfg.scene, 8.0).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();

    let mut group = c.benchmark_group("toy model");
    group.sample_size(10);
    group.bench_function("inference", |bench| {
        bench.iter(|| black_box(predict(&trainer.model, &scene.left, &scene.right).unwrap()))
    });
    // batch of two pairs, both views decoded, Adam update included
    group.bench_function("train step", |bench| {
        bench.iter(|| black_box(trainer.train_step().unwrap()))
    });
    group.finish();
}

criterion_group!(benches, toy);
criterion_main!(benches);
