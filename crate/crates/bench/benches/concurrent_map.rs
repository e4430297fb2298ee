use std::hint::black_box;
use std::thread;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mpmr::{hash_key, ConcurrentMap, ProbingTable, Sum};
use mpmr_bench::{zipf_corpus, zipf_keys};

fn probing_table(c: &mut Criterion) {
    let keys = zipf_keys(&zipf_corpus(10_000, 200_000));
    let mut group = c.benchmark_group("probing_table");
    group.throughput(Throughput::Elements(keys.len() as u64));
    group.bench_function("zipf_insert", |b| {
        b.iter(|| {
            let mut table = ProbingTable::with_capacity(1024);
            for k in &keys {
                table.probe_insert(hash_key(k), k.as_slice(), 1i64, &Sum);
            }
            black_box(table.len())
        })
    });
    group.finish();
}

fn concurrent_inserts(c: &mut Criterion) {
    let keys = zipf_keys(&zipf_corpus(10_000, 400_000));
    let mut group = c.benchmark_group("concurrent_map");
    group.throughput(Throughput::Elements(keys.len() as u64));
    group.sample_size(20);
    for threads in [1, 2, 4] {
        for segments in [1, 64] {
            let id = BenchmarkId::new(format!("segments_{segments}"), threads);
            group.bench_with_input(id, &(threads, segments), |b, &(threads, segments)| {
                b.iter(|| {
                    let mut map = ConcurrentMap::new(segments, 1024, threads).unwrap();
                    thread::scope(|s| {
                        for (t, part) in keys.chunks(keys.len().div_ceil(threads)).enumerate() {
                            let map = &map;
                            s.spawn(move || {
                                let mut w = map.writer(t, &Sum);
                                for k in part {
                                    w.insert(k, 1i64);
                                }
                            });
                        }
                    });
                    map.sync(&Sum);
                    black_box(map.size())
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, probing_table, concurrent_inserts);
criterion_main!(benches);
