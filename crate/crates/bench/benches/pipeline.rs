use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use repe_core::corpus::{self, TemplateBank};
use repe_core::intervene::{self, ScanPlan, ToyBackend};
use repe_core::pipeline::{self, PipelineConfig};
use repe_core::{extract, purify, toynet, weighting, Factor};

fn small() -> PipelineConfig {
    PipelineConfig {
        pairs_per_factor: 100,
        variants_per_family: 8,
        ..PipelineConfig::default()
    }
}

fn phases(c: &mut Criterion) {
    let cfg = small();
    let model = toynet::init_model(cfg.toy.clone()).unwrap();
    let bank = TemplateBank::builtin();
    let ex: Vec<_> = Factor::ALL
        .iter()
        .map(|&f| pipeline::extract_factor(&model, &bank, f, &cfg).unwrap())
        .collect();
    let raw = pipeline::raw_bundle(&model.model_id(), &ex).unwrap();
    let (purified, _) = purify::purify_bundle(&raw).unwrap();
    let vs = corpus::fill_templates(&bank, &cfg.family_ids(&bank), cfg.variants_per_family, 0).unwrap();
    let vset = toynet::capture_vignettes(&model, &vs, 0).unwrap();

    let pairs = corpus::atomic_pairs(&bank, Factor::Relevance, cfg.pairs_per_factor, 0).unwrap();
    c.bench_function("capture 100 pairs", |b| b.iter(|| toynet::capture_pairs(&model, black_box(&pairs), 0).unwrap()));

    let sup = &ex[0];
    c.bench_function("5-fold layer scan", |b| b.iter(|| pipeline::scan_set(black_box(&sup.set), Factor::Superiority, &cfg).unwrap()));
    c.bench_function("fit all layers", |b| b.iter(|| extract::fit_all_layers(black_box(&sup.set), Factor::Superiority).unwrap()));
    c.bench_function("purify bundle", |b| b.iter(|| purify::purify_bundle(black_box(&raw)).unwrap()));
    c.bench_function("regression sweep", |b| {
        b.iter(|| weighting::layer_sweep(black_box(&vset), &raw, &purified, None).unwrap())
    });

    let plan = ScanPlan {
        layers: Some(vec![6]),
        ..ScanPlan::for_family("toy")
    };
    c.bench_function("steering scan, one layer", |b| {
        b.iter_batched(
            || ToyBackend::new(&model, 0),
            |backend| {
                let part = intervene::partition_baseline(&backend, vset.records()).unwrap();
                intervene::layer_intervention_scan(&backend, vset.records(), &part, &purified, &plan).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
}

fn end_to_end(c: &mut Criterion) {
    let mut g = c.benchmark_group("toy pipeline");
    g.sample_size(10);
    let cfg = small();
    g.bench_function("all phases", |b| b.iter(|| pipeline::run_toy(black_box(&cfg)).unwrap()));
    g.finish();
}

criterion_group!(benches, phases, end_to_end);
criterion_main!(benches);
