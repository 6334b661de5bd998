//! Parallel vs serial throughput on the two data-parallel hot paths:
//! per-record loss gradients (the training inner loop) and greedy caption
//! generation. `par_map` uses rayon under the default `parallel` feature and
//! degrades to the serial path without it, so the comparison here measures
//! exactly what the feature flag buys.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prefixcap::data_synth::{generate_records, GrammarConfig, MAX_CAPTION_LEN};
use prefixcap::decode::{generate, DecodeConfig};
use prefixcap::encoder::EncoderConfig;
use prefixcap::lm::{Lm, LmConfig};
use prefixcap::mapper::{Mapper, MapperConfig, MapperKind};
use prefixcap::par::{par_map, serial_map};
use prefixcap::param::Bindings;
use prefixcap::tensor::Tape;
use prefixcap::text::Vocabulary;
use prefixcap::train::{record_loss, ModelBundle, TrainRecord};

fn setup() -> (ModelBundle<f32>, Vocabulary, Vec<TrainRecord>) {
    let grammar = GrammarConfig::default();
    let enc = EncoderConfig { d_clip: 32, seed: 17 };
    let vocab = Vocabulary::build(&grammar.all_captions()).unwrap();
    let (scenes, _) = generate_records(7, 64, 1, &grammar, &enc).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mapper = Mapper::new(
        MapperConfig {
            kind: MapperKind::Transformer,
            k: 10,
            d_clip: 32,
            d_lm: 32,
            layers: 2,
            heads: 2,
            hidden_mult: 4,
        },
        &mut rng,
    );
    let lm = Lm::new(
        LmConfig {
            vocab_size: vocab.size(),
            d_lm: 32,
            layers: 2,
            heads: 2,
            max_positions: 10 + MAX_CAPTION_LEN,
        },
        &mut rng,
    );
    let bundle = ModelBundle::new(enc, mapper, lm, true);
    let pairs: Vec<(Vec<f64>, String)> = scenes
        .iter()
        .map(|r| (r.embedding.clone(), r.caption.clone()))
        .collect();
    let records = TrainRecord::from_pairs(&pairs, &vocab, MAX_CAPTION_LEN).unwrap();
    (bundle, vocab, records)
}

fn loss_backward(bundle: &ModelBundle<f32>, record: &TrainRecord) -> f32 {
    let mut tape: Tape<f32> = Tape::new();
    let mut binds = Bindings::new();
    let loss = record_loss(&mut tape, &mut binds, bundle, record).unwrap();
    tape.backward(loss).unwrap();
    tape.data(loss)[0]
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (bundle, _, records) = setup();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for n in [8usize, 32] {
        let batch = &records[..n];
        group.bench_with_input(BenchmarkId::new("par_map", n), &n, |b, _| {
            b.iter(|| par_map(batch, |r| loss_backward(&bundle, r)))
        });
        group.bench_with_input(BenchmarkId::new("serial_map", n), &n, |b, _| {
            b.iter(|| serial_map(batch, |r| loss_backward(&bundle, r)))
        });
    }
    group.finish();
}

fn bench_caption_generation(c: &mut Criterion) {
    let (bundle, vocab, records) = setup();
    let cfg = DecodeConfig::default();
    let batch = &records[..16];
    let mut group = c.benchmark_group("caption_generation");
    group.sample_size(10);
    group.bench_function("par_map", |b| {
        b.iter(|| par_map(batch, |r| generate(&bundle, &r.embedding, &cfg, &vocab).unwrap().caption))
    });
    group.bench_function("serial_map", |b| {
        b.iter(|| {
            serial_map(batch, |r| generate(&bundle, &r.embedding, &cfg, &vocab).unwrap().caption)
        })
    });
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_caption_generation);
criterion_main!(benches);
