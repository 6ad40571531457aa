use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use cirrus::attack::{fitness, AttackConfig, CloudRenderer};
use cirrus::de::{run, Bounds, DeConfig, Scored};
use cirrus::imaging::Image;
use cirrus::models::{synth_dataset, toy_train, ToyTrainConfig};
use cirrus::perlin::{random_unit_grid, render_mask, ChannelEffectConfig};
use cirrus::pggn::{DiscriminatorWeights, GeneratorWeights};

fn perlin(c: &mut Criterion) {
    let mut group = c.benchmark_group("render_mask");
    for cells in [4, 64] {
        let grid = random_unit_grid(cells, 1).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(cells), &grid, |b, g| {
            b.iter(|| render_mask(black_box(g), 256, 256))
        });
    }
    group.finish();
}

fn pggn(c: &mut Criterion) {
    let gen = GeneratorWeights::random(52, 1);
    let disc = DiscriminatorWeights::random(2);
    let z = vec![0.1; 52];
    let set = gen.generate(&z).unwrap();
    c.bench_function("generate", |b| b.iter(|| gen.generate(black_box(&z)).unwrap()));
    c.bench_function("discriminate", |b| b.iter(|| disc.discriminate(black_box(&set)).unwrap()));
}

fn de_sphere(c: &mut Criterion) {
    let bounds = Bounds::uniform(10, -5.0, 5.0).unwrap();
    let cfg = DeConfig { np: 50, max_evals: 5_000, seed: 1, ..DeConfig::default() };
    c.bench_function("de_sphere_5000", |b| {
        b.iter(|| run(|x: &[f64]| Scored::plain(x.iter().map(|v| v * v).sum::<f64>()), &bounds, &cfg, |_| false).unwrap())
    });
}

fn query(c: &mut Criterion) {
    let model = toy_train(&synth_dataset(20, 64, 1), &ToyTrainConfig { epochs: 5, ..ToyTrainConfig::default() })
        .unwrap()
        .classifier;
    let gen = GeneratorWeights::random(52, 1);
    let clear = Image::filled(64, 64, 3, 0.5);
    let cfg = AttackConfig::default();
    let r: Vec<f64> = cfg.bounds(52).unwrap().lower().iter().zip(cfg.bounds(52).unwrap().upper()).map(|(l, u)| (l + u) / 2.0).collect();
    let renderer = CloudRenderer::new(&gen, ChannelEffectConfig::identity(), cfg.cloud_color, true, 64, 64);
    c.bench_function("fitness_64px", |b| {
        b.iter(|| fitness(black_box(&r), &clear, 0, &model, &renderer, cfg.alpha).unwrap())
    });
}

criterion_group!(benches, perlin, pggn, de_sphere, query);
criterion_main!(benches);
