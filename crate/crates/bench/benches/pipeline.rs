use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use levelscope::cluster::{cluster, kth_neighbor_distances};
use levelscope::embed::{dtw, embed_all, train, EncoderConfig, ModelCheckpoint, ModelKind};
use levelscope::ingest::{build_sequences, IngestConfig};
use levelscope::quality::{kendall_tau, perturb, PerturbationConfig};
use levelscope::rng;
use levelscope::synth::{generate, SynthConfig};
use levelscope::{validate_events, ClusterParams, Embedding, IntervalSequence};

fn sequences(n_farms: usize, n_legit: usize) -> Vec<IntervalSequence> {
    let cfg = SynthConfig { n_farms, farm_size: 5, n_legit, seed: 1, ..SynthConfig::default() };
    let (events, _) = generate(&cfg).unwrap();
    let events = validate_events(events).unwrap();
    build_sequences(&events, &IngestConfig::default()).0
}

fn model(seqs: &[IntervalSequence]) -> ModelCheckpoint {
    let cfg = EncoderConfig { hidden_dim: 64, epochs: 1, ..EncoderConfig::default() }.with_depth(4);
    train(ModelKind::Contrastive, seqs, &cfg).unwrap()
}

fn bench_dtw(c: &mut Criterion) {
    let seqs = sequences(2, 2);
    let (a, b) = (&seqs[0].intervals, &seqs[seqs.len() - 1].intervals);
    c.bench_function("dtw/49x49", |bench| bench.iter(|| dtw(black_box(a), black_box(b)).unwrap()));
}

fn bench_encoder(c: &mut Criterion) {
    let seqs = sequences(4, 20);
    let ckpt = model(&seqs);
    c.bench_function("encoder/forward_h64_d4", |bench| {
        bench.iter(|| ckpt.embed_values(black_box(&seqs[0].intervals)).unwrap())
    });
}

fn bench_cluster(c: &mut Criterion) {
    let seqs = sequences(20, 200);
    let embs: Vec<Embedding> = embed_all(&model(&seqs), &seqs, None).unwrap();
    let points: Vec<&[f64]> = embs.iter().map(|e| e.vector.as_slice()).collect();
    c.bench_function("cluster/knn_300", |bench| bench.iter(|| kth_neighbor_distances(black_box(&points), 3).unwrap()));
    c.bench_function("cluster/dbscan_quantile_300", |bench| {
        bench.iter(|| cluster(black_box(&embs), &ClusterParams::quantile(0.1)).unwrap())
    });
}

fn bench_quality(c: &mut Criterion) {
    let seqs = sequences(1, 1);
    let cfg = PerturbationConfig::default();
    let mut rng = rng::stream(0, &[b"bench"]);
    c.bench_function("quality/perturb_lv5", |bench| {
        bench.iter(|| perturb(black_box(&seqs[0].intervals), 5, &cfg, &mut rng).unwrap())
    });
    let xs: Vec<f64> = (0..10).map(|i| f64::from((i * 7) % 10)).collect();
    let ys: Vec<f64> = (0..10).map(f64::from).collect();
    c.bench_function("quality/kendall_10", |bench| {
        bench.iter_batched(|| xs.clone(), |x| kendall_tau(&x, black_box(&ys)).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, bench_dtw, bench_encoder, bench_cluster, bench_quality);
criterion_main!(benches);
