// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-pair forward passes on the rayon pool vs a single worker.
//!
//! Built with `--no-default-features` both variants take the sequential
//! path, which gives the fallback's baseline.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use headprobe::engine::load_checkpoint;
use headprobe::parallel::with_workers;
use headprobe::probes::distance::layer_scores;
use headprobe::stimuli::align_pair;
use headprobe::{demo, stimuli::AlignedPair};

fn bench_layer_scores(c: &mut Criterion) {
    let dir = tempfile::tempdir().expect("scratch directory");
    demo::write_workspace(dir.path(), 1).expect("demo workspace");
    let ckpt = load_checkpoint(&dir.path().join("models/demo/step8000")).expect("demo checkpoint");
    let pairs: Vec<AlignedPair> = demo::pairs(1)
        .iter()
        .map(|p| align_pair(&ckpt.tokenizer, p).expect("aligned"))
        .collect();
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).max(2);
    let mode = if cfg!(feature = "parallel") {
        "rayon"
    } else {
        "sequential-build"
    };

    let mut g = c.benchmark_group(format!("layer_scores/{mode}"));
    g.sample_size(20);
    for (name, workers) in [("sequential", 1), ("parallel", threads)] {
        g.bench_with_input(BenchmarkId::new(name, workers), &workers, |b, &w| {
            b.iter(|| {
                with_workers(w, || {
                    layer_scores(&ckpt.config, &ckpt.weights, &pairs, 8000).expect("scores")
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_layer_scores);
criterion_main!(benches);
