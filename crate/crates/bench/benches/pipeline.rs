use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pi2i_bench::{fixture, small_model};
use pi2i_core::indexer::{accumulate_coclicks, build_index_from_stats};
use pi2i_core::model::grad;
use pi2i_core::retrieval::{retrieve_all, EvalQuery, Scorer};
use pi2i_core::sampler::sample_dataset;
use pi2i_core::{IndexParams, ModelParams};

fn index_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("index_build");
    group.sample_size(10);
    for users in [250, 1000] {
        let f = fixture(users);
        group.bench_with_input(BenchmarkId::from_parameter(users), &f, |b, f| {
            b.iter(|| {
                let stats = accumulate_coclicks(&f.split.train, f.index.window, f.index.user_item_cap);
                build_index_from_stats(&stats, &f.index)
            })
        });
    }
    group.finish();
}

fn truncation(c: &mut Criterion) {
    let f = fixture(1000);
    let mut group = c.benchmark_group("index_truncation");
    for t in [50, 250, 1250] {
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, &t| {
            b.iter(|| build_index_from_stats(&f.stats, &IndexParams { truncation: t, ..f.index.clone() }))
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let f = fixture(1000);
    c.bench_function("sample_dataset/1000", |b| b.iter(|| sample_dataset(&f.split, &f.table, &f.sampler).unwrap()));
}

fn gradient(c: &mut Criterion) {
    let f = fixture(250);
    let cfg = small_model();
    let params = ModelParams::init(f.vocab, &cfg, 0);
    let batch = &f.samples[..cfg.batch_size.min(f.samples.len())];
    c.bench_function("grad/batch128", |b| b.iter(|| grad(&params, &f.store, batch, &cfg)));
}

fn retrieval(c: &mut Criterion) {
    let f = fixture(250);
    let cfg = small_model();
    let params = ModelParams::init(f.vocab, &cfg, 0);
    let queries = EvalQuery::test(&f.split);
    let mut group = c.benchmark_group("retrieve_all");
    group.sample_size(10);
    group.bench_function("swing", |b| b.iter(|| retrieve_all(&queries, &f.table, &Scorer::SwingSum { max_seq_len: 50 }, 50)));
    let model = Scorer::Model {
        params: &params,
        store: &f.store,
        cfg: &cfg,
    };
    group.bench_function("model", |b| b.iter(|| retrieve_all(&queries, &f.table, &model, 50)));
    group.finish();
}

criterion_group!(benches, index_build, truncation, sampling, gradient, retrieval);
criterion_main!(benches);
