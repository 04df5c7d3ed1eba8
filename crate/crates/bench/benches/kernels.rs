use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlfat_bench::mnist_fixture;
use rlfat_core::attacks::{pgd, AttackBudget, AttackLoss};
use rlfat_core::autodiff::kernels::{conv2d_forward, ConvGeometry};
use rlfat_core::rbs::{self, SplitMode};
use rlfat_core::training::{evaluate_objective, prepare_batch};
use rlfat_core::{Method, TrainConfig};

fn conv(c: &mut Criterion) {
    let xs = [32, 16, 14, 14];
    let ws = [32, 16, 3, 3];
    let x: Vec<f32> = (0..xs.iter().product()).map(|i| (i % 17) as f32 / 17.0).collect();
    let w: Vec<f32> = (0..ws.iter().product()).map(|i| (i % 7) as f32 / 7.0 - 0.5).collect();
    let geom = ConvGeometry::new(&xs, &ws, 1, 1).unwrap();
    c.bench_function("conv2d 32x16x14x14 k3", |b| b.iter(|| conv2d_forward(&x, &w, &geom)));
}

fn attack(c: &mut Criterion) {
    let (model, x, labels) = mnist_fixture(32);
    let budget = AttackBudget::mnist();
    c.bench_function("pgd 7 steps batch 32", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(0),
            |mut r| pgd(&model, AttackLoss::CrossEntropy, &x, &labels, &budget, &mut r).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn shuffle(c: &mut Criterion) {
    let (_, x, _) = mnist_fixture(32);
    c.bench_function("rbs k2 batch 32", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(0),
            |mut r| rbs::apply_batch(&mut r, &x, 2, SplitMode::Random).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn objective(c: &mut Criterion) {
    let (model, x, labels) = mnist_fixture(32);
    let mut group = c.benchmark_group("objective batch 32");
    for method in [Method::Natural, Method::Pgdat, Method::RlfatP, Method::RlfatT] {
        let mut cfg = TrainConfig::new(method);
        cfg.budget = AttackBudget::mnist();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut s = ChaCha8Rng::seed_from_u64(2);
        let batch = prepare_batch(&model, &cfg, &x, &labels, &mut a, &mut s).unwrap();
        group.bench_function(method.name(), |b| {
            b.iter(|| evaluate_objective(&model, method, &batch, cfg.lambda, cfg.eta).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, attack, shuffle, objective);
criterion_main!(benches);
