use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sves_core::cmaes::CmaState;
use sves_core::fitness::BenchmarkFn;
use sves_core::lowrank::{apply_candidate, build_layout};
use sves_core::model::task::addition_splits;
use sves_core::model::{Architecture, PolicyModel, TransformerShape};
use sves_core::scheduler::wire::{EvalJob, Message};

fn model(d_model: usize) -> PolicyModel {
    let shape = TransformerShape {
        layers: 2,
        d_model,
        heads: 2,
        d_ff: 2 * d_model,
        max_seq: 12,
    };
    PolicyModel::new(Architecture::Transformer(shape), 1).unwrap().with_max_new_tokens(4)
}

fn cma_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("cma_ask_tell");
    for dim in [64, 416] {
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |b, &dim| {
            let mut state = CmaState::new(dim, 0.3, 32, 1).unwrap();
            b.iter(|| {
                let mut gen = state.ask().unwrap();
                for i in 0..gen.len() {
                    let r = BenchmarkFn::Sphere.reward(&gen.candidates()[i]);
                    gen.set_reward(i, r);
                }
                state.tell(&gen).unwrap();
            });
        });
    }
    group.finish();
}

fn candidate_application(c: &mut Criterion) {
    let mut group = c.benchmark_group("apply_candidate");
    for rank in [8, 64] {
        let model = model(64);
        let adapters: Vec<_> = model
            .init_adapters(rank, 1)
            .unwrap()
            .iter()
            .map(|a| a.decompose().unwrap())
            .collect();
        let layout = build_layout(&adapters, 40.0).unwrap();
        let x = vec![0.01; layout.dim()];
        group.bench_with_input(BenchmarkId::from_parameter(rank), &rank, |b, _| {
            b.iter(|| apply_candidate(black_box(&adapters), &layout, black_box(&x)).unwrap());
        });
    }
    group.finish();
}

fn greedy_accuracy(c: &mut Criterion) {
    let model = model(16);
    let (_, align) = addition_splits(19, 200, 1).unwrap();
    let subset = &align[..100];
    c.bench_function("accuracy_100_examples_d16", |b| {
        let bound = model.base();
        b.iter(|| bound.accuracy(black_box(subset)).unwrap());
    });
}

fn wire_round_trip(c: &mut Criterion) {
    let job = Message::EvalJob(EvalJob {
        generation: 7,
        index: 3,
        seed: 0xdead_beef,
        config_hash: [9; 32],
    });
    c.bench_function("eval_job_round_trip", |b| {
        b.iter(|| Message::decode(&black_box(&job).encode()).unwrap());
    });
}

criterion_group!(benches, cma_generation, candidate_application, greedy_accuracy, wire_round_trip);
criterion_main!(benches);
