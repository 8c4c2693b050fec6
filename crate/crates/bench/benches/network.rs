use criterion::{black_box, criterion_group, criterion_main, Criterion};
use flownet_bench::synthetic_workflows;
use flownet_core::network::build_network;
use flownet_core::{EmbeddingCache, HashEmbedder, NodeRef};

fn bench_construction(c: &mut Criterion) {
    let embedder = HashEmbedder::new(128, 0);
    let mut group = c.benchmark_group("build_network");
    for count in [10usize, 50, 100] {
        let workflows = synthetic_workflows(count, 4, 12, 7);
        // Warm the cache once so the measurement isolates clustering and
        // edge bookkeeping rather than first-touch embedding.
        let mut cache = EmbeddingCache::new();
        build_network(&workflows, 0.7, &embedder, &mut cache).unwrap();
        group.bench_function(format!("{count}x4"), |b| {
            b.iter(|| build_network(black_box(&workflows), 0.7, &embedder, &mut cache).unwrap())
        });
    }
    group.finish();
}

fn bench_hop_distances(c: &mut Criterion) {
    let embedder = HashEmbedder::new(128, 0);
    let workflows = synthetic_workflows(100, 4, 12, 7);
    let mut cache = EmbeddingCache::new();
    let (network, _) = build_network(&workflows, 0.7, &embedder, &mut cache).unwrap();
    c.bench_function(
        &format!("distances_from/{}-nodes", network.node_count()),
        |b| b.iter(|| network.distances_from(black_box(NodeRef::Source))),
    );
}

criterion_group!(benches, bench_construction, bench_hop_distances);
criterion_main!(benches);
