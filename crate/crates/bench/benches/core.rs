use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sign_bench::{batch, generator, rng, two_modes};
use sign_core::diffcore::Graph;
use sign_core::eval::sliced_w2;
use sign_core::losses::{LossOptions, LossWeights, Models, SignBatch, Sources};
use sign_core::schedule::{NoiseSchedule, ScheduleParams};
use sign_core::score::{KernelScore, ScoreSource};

fn forward_backward(c: &mut Criterion) {
    let net = generator();
    let mut group = c.benchmark_group("mlp");
    for rows in [64usize, 256] {
        let x = batch(rows, 2, 1);
        group.bench_with_input(BenchmarkId::new("forward", rows), &x, |b, x| {
            b.iter(|| net.forward_values(x).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", rows), &x, |b, x| {
            b.iter(|| {
                let mut work = net.clone();
                let mut g = Graph::new();
                let bound = work.bind(&mut g, true);
                let xv = g.constant(x);
                let y = work.forward(&mut g, &bound, xv).unwrap();
                let l = g.sum_squares(y);
                g.backward(l).unwrap();
                work.accumulate_grads(&g, &bound).unwrap();
            })
        });
    }
    group.finish();
}

fn sign_step(c: &mut Criterion) {
    let net = generator();
    let sched = NoiseSchedule::new(ScheduleParams::default()).unwrap();
    let teacher = two_modes();
    let w = LossWeights { lambda_n: 0.1, ..LossWeights::default() };
    let opts = LossOptions::default();
    let mut r = rng(2);
    c.bench_function("sign_total_b256", |b| {
        b.iter(|| {
            let x = teacher.sample(256, &mut r);
            let z = batch(256, 2, 3);
            let levels = vec![9; 256];
            let sources = Sources { teacher: &teacher, learned: None };
            let sb = SignBatch::prepare(x, z, levels, &net, &w, sources, &sched, &opts, None, &mut r).unwrap();
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let m = Models::new(&mut g, &net, &bound, &net);
            let s = sign_core::losses::sign_total(&mut g, &m, &sb, &w, &opts).unwrap();
            g.backward(s.objective).unwrap();
        })
    });
}

fn kernel_score(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel_score");
    for m in [1_000usize, 10_000] {
        let k = KernelScore::new(batch(m, 2, 4), 0.01).unwrap();
        let x = batch(256, 2, 5);
        group.bench_with_input(BenchmarkId::from_parameter(m), &x, |b, x| b.iter(|| k.score(x, 0.5).unwrap()));
    }
    group.finish();
}

fn sliced(c: &mut Criterion) {
    let a = batch(10_000, 2, 6);
    let bt = batch(10_000, 2, 7);
    let mut r = rng(8);
    c.bench_function("sliced_w2_10k_128", |b| b.iter(|| sliced_w2(&a, &bt, 128, &mut r).unwrap()));
}

criterion_group!(benches, forward_backward, sign_step, kernel_score, sliced);
criterion_main!(benches);
