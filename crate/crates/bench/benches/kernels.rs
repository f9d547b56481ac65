use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng as _;

use tracer_core::critic::{quantile_huber_td_loss, sample_taus};
use tracer_core::entropy::{estimate_entropy, EntropyVariant};
use tracer_core::nn::{cosine_features, Graph, Module, Tensor};
use tracer_core::seeding;
use tracer_core::{collect_dataset, BehaviorPolicy, EnvId, QuantileNet, TrainConfig, TrainState};

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = seeding::rng(seed, &[]);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

fn gemm(c: &mut Criterion) {
    let a = random(64, 64, 1);
    let b = random(64, 64, 2);
    c.bench_function("gemm_64", |bch| bch.iter(|| black_box(a.matmul(&b).unwrap())));
    let a = random(256, 256, 3);
    let b = random(256, 256, 4);
    c.bench_function("gemm_256", |bch| bch.iter(|| black_box(a.matmul(&b).unwrap())));
}

fn critic(c: &mut Criterion) {
    let net = QuantileNet::new(7, &[64, 64], 64, 0, &mut seeding::rng(5, &[]));
    let x = random(64, 7, 6);
    let taus = sample_taus(32, &mut seeding::rng(7, &[]));
    let targets = random(64, 32, 8);
    c.bench_function("critic_forward", |bch| {
        bch.iter(|| black_box(net.quantiles(&x, &taus).unwrap()))
    });
    c.bench_function("critic_forward_backward", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let p = net.bind(&mut g, "d");
            let xv = g.constant(x.clone());
            let f = g.constant(cosine_features(&taus, net.embed.basis()).unwrap());
            let out = net.forward(&mut g, &p, xv, f).unwrap();
            let per = quantile_huber_td_loss(&mut g, out, &targets, &taus, 0.1).unwrap();
            let l = g.mean(per);
            black_box(g.backward(l).unwrap());
        })
    });
}

fn entropy(c: &mut Criterion) {
    let taus = sample_taus(32, &mut seeding::rng(9, &[]));
    let values = random(1, 32, 10).into_data();
    c.bench_function("entropy_32", |bch| {
        bch.iter(|| black_box(estimate_entropy(&taus, &values, EntropyVariant::Verbatim)))
    });
}

fn train_step(c: &mut Criterion) {
    let data = collect_dataset(EnvId::PointMass, &BehaviorPolicy::medium_replay(), 2000, 1).unwrap();
    let view = data.training_view();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for name in ["tracer", "driql", "riql", "iql"] {
        let mut cfg = TrainConfig::desk();
        cfg.set("algorithm", name).unwrap();
        if name == "iql" {
            cfg.ensemble = 2;
        }
        let state = TrainState::for_view(&cfg, &view).unwrap();
        group.bench_function(name, |bch| {
            bch.iter_batched(
                || state.clone(),
                |mut s| black_box(s.train_step(&view).unwrap()),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, gemm, critic, entropy, train_step);
criterion_main!(benches);
