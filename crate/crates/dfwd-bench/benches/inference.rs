//! Goodness decoding, head decoding, and sample construction.

use criterion::{criterion_group, criterion_main, Criterion};
use dfwd_bench::{fixture_data, fixture_mlp, fixture_rows};
use dfwd_core::eval::{decode, DecodeConfig};
use dfwd_core::rng::{stream, substream};
use dfwd_core::{make_batch, Strategy};

const SEED: u64 = 11;

fn decoding(c: &mut Criterion) {
    let rows = fixture_rows(256, SEED);
    let mut group = c.benchmark_group("inference");

    group.bench_function("decode_goodness_256", |b| {
        let net = fixture_mlp(128, &Strategy::DfO { group_size: 2 }, SEED);
        b.iter(|| decode(&net, &rows, DecodeConfig::default()).unwrap());
    });

    group.bench_function("decode_head_256", |b| {
        let net = fixture_mlp(128, &Strategy::Backprop, SEED);
        b.iter(|| decode(&net, &rows, DecodeConfig::default()).unwrap());
    });

    group.bench_function("make_batch_100", |b| {
        let ds = fixture_data(512, SEED);
        let net = fixture_mlp(128, &Strategy::Greedy, SEED);
        let emb = net.embedding.expect("local nets carry an embedding");
        let idx: Vec<usize> = (0..100).collect();
        let mut rng = substream(SEED, stream::NEGATIVES);
        b.iter(|| {
            make_batch(&ds.train.images, &ds.train.labels, &idx, 3, &emb, &mut rng).unwrap()
        });
    });

    group.finish();
}

criterion_group!(benches, decoding);
criterion_main!(benches);
