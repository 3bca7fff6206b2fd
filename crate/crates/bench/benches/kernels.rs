use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sitfuse::fusion::Scheme;
use sitfuse::gridworld::{build_graph, generate_environment, shortest_distances, Action, ObjectClass};
use sitfuse::losses::{total_loss, LossConfig};
use sitfuse::percept::ObservationContext;
use sitfuse_bench::{bank, desk_params, policy, reps, world};

fn environment(c: &mut Criterion) {
    let params = desk_params();
    let w = world(3);
    c.bench_function("generate_environment", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            generate_environment(black_box(seed), &params).unwrap()
        })
    });
    c.bench_function("build_graph", |b| b.iter(|| build_graph(black_box(&w.map))));
    c.bench_function("shortest_distances", |b| {
        b.iter(|| shortest_distances(&w.graph, black_box(ObjectClass::Bed), 1).unwrap())
    });
}

fn extraction(c: &mut Criterion) {
    let w = world(4);
    let bank = bank();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut node = 0;
    c.bench_function("extract_bank", |b| {
        b.iter(|| {
            node = (node + 13) % w.graph.node_count();
            bank.extract(&ObservationContext::new(&w, node, ObjectClass::Door), &mut rng)
        })
    });
}

fn networks(c: &mut Criterion) {
    let w = world(5);
    let bank = bank();
    let batch = reps(&w, &bank, 128);
    let samples: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(i, r)| (r, Action::ALL[i % Action::COUNT]))
        .collect();
    let mut group = c.benchmark_group("policy");
    for scheme in Scheme::ALL {
        let p = policy(scheme, &bank);
        group.bench_function(format!("forward/{}", scheme.name()), |b| {
            b.iter(|| p.distribution(black_box(&batch[0])).unwrap())
        });
        group.bench_function(format!("loss_and_grad_128/{}", scheme.name()), |b| {
            b.iter_batched(
                || p.clone(),
                |mut q| total_loss(&mut q, &samples, None, &LossConfig::default()).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, environment, extraction, networks);
criterion_main!(benches);
