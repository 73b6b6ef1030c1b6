// SPDX-License-Identifier: Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use frp_core::cc_adaptive::{Bucketing, CCStrategy};
use frp_core::engine::{Engine, EngineConfig, WindowContext, WorkloadSpec};
use frp_core::gate::{encode_query, gate, parse_predicates, sliced_predict, ExpertSet, GatingNet};
use frp_core::harness::{demo_catalog, demo_schema};
use frp_core::model_select::{select, ModelSpace, Scorer, SelectRequest, Trainer};
use frp_core::plan_opt::{gen_candidates, optimize_base, MutationGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn plan_opt(c: &mut Criterion) {
    let catalog = demo_catalog();
    let names: Vec<&str> = catalog.relations.iter().map(|r| r.name.as_str()).collect();
    let query = catalog.query(&names).unwrap();
    c.bench_function("optimize_base/4rel", |b| b.iter(|| optimize_base(black_box(&query), &catalog)));
    let grid = MutationGrid::default();
    c.bench_function("gen_candidates/4rel_n20", |b| {
        b.iter(|| gen_candidates(&query, &catalog, 20, &grid, &mut ChaCha8Rng::seed_from_u64(1)))
    });
}

fn gating(c: &mut Criterion) {
    let schema = demo_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = GatingNet::random(&schema, 4, 8, 16, 2, 0.05, &mut rng);
    let experts = ExpertSet::random_linear(16, 8, &mut rng);
    let preds = parse_predicates("gender = Male AND age = 24").unwrap();
    let enc = encode_query(&preds, &schema).unwrap();
    let x = vec![0.5; 8];
    c.bench_function("gate/16_experts", |b| b.iter(|| gate(black_box(&enc), &net).unwrap()));
    let w = gate(&enc, &net).unwrap();
    c.bench_function("sliced_predict/16_experts", |b| b.iter(|| sliced_predict(&w, &experts, black_box(&x)).unwrap()));
    c.bench_function("dense_predict/16_experts", |b| b.iter(|| experts.dense_predict(&w, black_box(&x)).unwrap()));
}

fn engine(c: &mut Criterion) {
    let spec =
        WorkloadSpec { key_space: 100, zipf_theta: 0.9, write_fraction: 0.5, seed: 7, ..WorkloadSpec::default() };
    let strategy = CCStrategy::prescribed(Bucketing::new(4, 1.0, 20.0).unwrap());
    c.bench_function("run_window/500_ticks", |b| {
        b.iter(|| {
            let mut e = Engine::new(EngineConfig::default());
            e.run_window(&spec, &strategy, 500, &mut WindowContext::new(8, 50)).unwrap()
        })
    });
}

fn model_select(c: &mut Criterion) {
    let space = ModelSpace::uniform(4, 4, 1).unwrap();
    let scorer = Scorer::blended(0.8, 0.1, 1.0, 1);
    let trainer = Trainer { cost_per_epoch: 4.0, sigma: 0.005, seed: 1 };
    let req = SelectRequest { budget: 600.0, ..SelectRequest::default() };
    c.bench_function("select/256_models", |b| {
        b.iter(|| select(&space, &scorer, &trainer, &req, &mut ChaCha8Rng::seed_from_u64(2)).unwrap())
    });
}

criterion_group!(benches, plan_opt, gating, engine, model_select);
criterion_main!(benches);
