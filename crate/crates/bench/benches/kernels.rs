use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use poiaudit_bench::desk_fixture;
use poiaudit_core::defense::{planar_laplace_inverse_cdf, sample_planar_laplace, DpConfig, DpSgdHook};
use poiaudit_core::eval::mia_eval;
use poiaudit_core::extraction::{loc_extract, traj_extract, LocExtractConfig, TrajExtractConfig};
use poiaudit_core::membership::{lira_from_scores, spa_tem_query, LocTarget, SpaTemConfig};
use poiaudit_core::{Example, GradientHook, Split};

fn model_kernels(c: &mut Criterion) {
    let (ds, model) = desk_fixture();
    let t = ds.split(Split::Train).find(|t| t.len() >= 4).expect("a long trajectory");
    let examples: Vec<Example> = ds
        .split(Split::Train)
        .take(32)
        .map(|t| Example {
            user: t.user,
            prefix: &t.visits[..t.len() - 1],
            target: t.visits[t.len() - 1].location,
        })
        .collect();
    c.bench_function("forward/4-step prefix", |b| b.iter(|| model.forward(t.user, black_box(&t.visits[..4]))));
    c.bench_function("gradient/batch of 32", |b| b.iter(|| model.gradient(black_box(&examples))));
    let mut hook = DpSgdHook::new(DpConfig::default()).unwrap();
    c.bench_function("dpsgd/clip and noise 32 per-example gradients", |b| {
        b.iter_batched(
            || model.per_example_gradients(&examples).unwrap().into_iter().map(|g| g.0).collect(),
            |g| hook.aggregate(g),
            BatchSize::LargeInput,
        )
    });
}

fn attack_kernels(c: &mut Criterion) {
    let (_, model) = desk_fixture();
    let loc = LocExtractConfig::default();
    c.bench_function("locextract/one user, 50 queries", |b| b.iter(|| loc_extract(&model, 3, black_box(&loc))));
    let traj = TrajExtractConfig {
        beam_width: 10,
        target_length: 4,
        ..TrajExtractConfig::default()
    };
    c.bench_function("trajextract/beam 10, length 4", |b| b.iter(|| traj_extract(&model, 3, 7, black_box(&traj))));
    let spatem = SpaTemConfig::default();
    let target = LocTarget { user: 3, location: 11 };
    c.bench_function("spatem/10x10 queries", |b| b.iter(|| spa_tem_query(&model, black_box(&target), &spatem)));
}

fn statistics_kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..1000).map(|_| rng.gen()).collect();
    let labels: Vec<bool> = (0..1000).map(|i| i % 2 == 0).collect();
    c.bench_function("mia_eval/1000 targets", |b| b.iter(|| mia_eval(black_box(&scores), &labels, &[0.01, 0.1])));
    let ins: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
    let outs: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
    c.bench_function("lira/16 in, 16 out", |b| b.iter(|| lira_from_scores(black_box(0.4), &ins, &outs, 1.0)));
    c.bench_function("planar_laplace/inverse cdf", |b| b.iter(|| planar_laplace_inverse_cdf(black_box(0.73), 0.01)));
    c.bench_function("planar_laplace/sample", |b| b.iter(|| sample_planar_laplace(&mut rng, black_box(0.01))));
}

criterion_group!(benches, model_kernels, attack_kernels, statistics_kernels);
criterion_main!(benches);
