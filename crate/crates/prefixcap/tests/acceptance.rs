//! Acceptance suite: one pass/fail line per criterion.
//!
//! Criteria 5, 6, 7, and 10 run full (small-scale) training; the whole suite
//! is CPU-only and seed-pinned.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prefixcap::config::RunConfig;
use prefixcap::data_synth::{generate_dataset, GrammarConfig, MAX_CAPTION_LEN};
use prefixcap::decode::{exhaustive_best_from_prefix, generate_from_prefix, DecodeConfig};
use prefixcap::encoder::{load_embeddings, EncoderConfig};
use prefixcap::gradcheck::suites;
use prefixcap::interpret::interpret_prefix;
use prefixcap::lm::{log_softmax_entry, Lm, LmConfig};
use prefixcap::mapper::{map_to_prefix, Mapper, MapperConfig, MapperKind};
use prefixcap::metrics::{bleu4, cider, rouge_l};
use prefixcap::param::Bindings;
use prefixcap::pipeline::{evaluate, run_ablation, run_training, EvalScores, TrainedRun};
use prefixcap::tensor::Tape;
use prefixcap::text::{Vocabulary, EOS, PAD};
use prefixcap::train::{
    build_sequence, param_bytes, train, ModelBundle, TrainConfig, TrainRecord,
};

fn report(n: usize, name: &str, ok: bool, detail: &str) {
    println!(
        "criterion {n} ({name}): {} {detail}",
        if ok { "pass" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

/// The pinned end-to-end configuration shared by criteria 5, 7, and 10.
fn pinned_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig { d_clip: 64, seed: 17 };
    cfg.mapper = MapperConfig {
        kind: MapperKind::Transformer,
        k: 10,
        d_clip: 64,
        d_lm: 64,
        layers: 8,
        heads: 4,
        hidden_mult: 4,
    };
    cfg.lm_layers = 4;
    cfg.lm_heads = 4;
    cfg.max_positions = 10 + MAX_CAPTION_LEN;
    cfg.train = TrainConfig {
        epochs: 20,
        batch_size: 2,
        lr: 5e-4,
        warmup_steps: 200,
        weight_decay: 0.01,
        freeze_lm: true,
        seed: 7,
        max_len: MAX_CAPTION_LEN,
    };
    cfg.pretrain_steps = 2000;
    cfg.pretrain_lr = 1e-3;
    cfg.pretrain_batch_size = 16;
    cfg.pretrain_seed = 99;
    cfg.model_seed = 1234;
    cfg.train_data = Some(dir.join("train.tsv"));
    cfg.test_data = Some(dir.join("test.tsv"));
    cfg
}

fn write_pinned_dataset(cfg: &RunConfig) {
    generate_dataset(
        7,
        400,
        100,
        &GrammarConfig::default(),
        &cfg.encoder,
        cfg.train_data.as_deref().unwrap(),
        cfg.test_data.as_deref().unwrap(),
    )
    .unwrap();
}

/// One full pinned run: train, then caption and score the test split.
fn pinned_run(cfg: &RunConfig) -> (TrainedRun, Vec<String>, EvalScores) {
    let run = run_training(cfg).unwrap();
    let test_pairs = load_embeddings(cfg.test_data.as_deref().unwrap()).unwrap();
    let decode = DecodeConfig::default();
    let captions: Vec<String> =
        prefixcap::pipeline::caption_pairs(&run.bundle, &run.vocab, &test_pairs, &decode)
            .unwrap()
            .into_iter()
            .map(|g| g.caption)
            .collect();
    let scores = evaluate(&run.bundle, &run.vocab, &test_pairs, &decode).unwrap();
    (run, captions, scores)
}

fn small_bundle(seed: u64, freeze_lm: bool) -> (ModelBundle<f32>, Vocabulary) {
    let vocab = Vocabulary::build(&["a red circle next to a blue square".to_string()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mapper = Mapper::new(
        MapperConfig {
            kind: MapperKind::Transformer,
            k: 2,
            d_clip: 8,
            d_lm: 16,
            layers: 1,
            heads: 2,
            hidden_mult: 2,
        },
        &mut rng,
    );
    let lm = Lm::new(
        LmConfig {
            vocab_size: vocab.size(),
            d_lm: 16,
            layers: 1,
            heads: 2,
            max_positions: 16,
        },
        &mut rng,
    );
    let bundle = ModelBundle::new(EncoderConfig { d_clip: 8, seed: 3 }, mapper, lm, freeze_lm);
    (bundle, vocab)
}

#[test]
fn criterion_1_gradient_fidelity() {
    let start = Instant::now();
    let suites = suites::run_all();
    let elapsed = start.elapsed().as_secs_f64();
    let mut ok = elapsed <= 120.0;
    let mut detail = String::new();
    for s in &suites {
        ok &= s.passes();
        detail.push_str(&format!("{}={:.2e} ", s.name, s.report.max_rel_err));
    }
    detail.push_str(&format!("({elapsed:.1}s)"));
    report(1, "gradient fidelity", ok, &detail);
}

#[test]
fn criterion_2_freeze_contract() {
    let (mut bundle, vocab) = small_bundle(5, true);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs: Vec<(Vec<f64>, String)> = (0..8)
        .map(|i| {
            let emb: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cap = if i % 2 == 0 { "a red circle" } else { "a blue square" };
            (emb, cap.to_string())
        })
        .collect();
    let records = TrainRecord::from_pairs(&pairs, &vocab, 8).unwrap();
    let cfg = TrainConfig {
        epochs: 100, // 8 records / batch 4 = 2 steps per epoch -> 200 steps
        batch_size: 4,
        lr: 1e-3,
        warmup_steps: 10,
        weight_decay: 0.01,
        freeze_lm: true,
        seed: 1,
        max_len: 8,
    };
    let lm_before = param_bytes(&bundle.lm);
    let mapper_before = param_bytes(&bundle.mapper);
    let log = train(&mut bundle, &records, &cfg).unwrap();
    let ok = log.len() == 200
        && param_bytes(&bundle.lm) == lm_before
        && param_bytes(&bundle.mapper) != mapper_before;
    report(2, "freeze contract", ok, "200 steps, LM bytes identical");
}

#[test]
fn criterion_3_mask_contract() {
    let (bundle, vocab) = small_bundle(6, true);
    let k = bundle.mapper.cfg().k;
    let v = bundle.lm.cfg.vocab_size;
    // 3 live tokens (incl. EOS) out of max_len 5: two trailing PAD targets.
    let tokens = vocab.encode("a red", 5).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let mut binds = Bindings::new();
    let bundle64 = to_f64(&bundle);
    let clip: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect();
    let clip_id = tape.constant(clip, vec![1, 8]).unwrap();
    let prefix = bundle64.mapper.forward(&mut tape, &mut binds, clip_id).unwrap();
    let (inputs, targets, mask) =
        build_sequence(&mut tape, &mut binds, &bundle64.lm, prefix, &tokens).unwrap();
    let logits = bundle64.lm.forward(&mut tape, &mut binds, inputs).unwrap();
    let loss = tape.cross_entropy(logits, &targets, &mask).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(logits).unwrap();

    let mut ok = true;
    for (pos, &live) in mask.iter().enumerate() {
        let row = &grad[pos * v..(pos + 1) * v];
        if live {
            ok &= row.iter().any(|&g| g != 0.0);
        } else {
            ok &= row.iter().all(|&g| g == 0.0);
        }
    }
    // Sanity: the mask really covers prefix and PAD positions.
    ok &= !mask[..k].iter().any(|&m| m);
    ok &= targets[k + tokens.live_len..].iter().all(|&t| t == PAD);
    report(3, "mask contract", ok, "zero grads at prefix and PAD logits");
}

/// Rebuild a bundle at f64 by copying every parameter.
fn to_f64(bundle: &ModelBundle<f32>) -> ModelBundle<f64> {
    use prefixcap::param::Module;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mapper = Mapper::new(bundle.mapper.cfg().clone(), &mut rng);
    let lm = Lm::new(bundle.lm.cfg.clone(), &mut rng);
    let mut out = ModelBundle::new(bundle.encoder.clone(), mapper, lm, bundle.freeze_lm);
    let mut src: Vec<Vec<f64>> = Vec::new();
    bundle.visit("", &mut |_, p| {
        src.push(p.data.iter().map(|&x| x as f64).collect())
    });
    let mut i = 0;
    out.visit_mut("", &mut |_, p| {
        p.data = src[i].clone();
        i += 1;
    });
    out
}

/// Greedy decoding reimplemented from scratch as an oracle: one forward pass
/// per emitted token, argmax with lowest-id tie break.
fn greedy_oracle(
    bundle: &ModelBundle<f32>,
    prefix: &[f32],
    max_len: usize,
) -> (Vec<usize>, f64) {
    let k = bundle.mapper.cfg().k;
    let d = bundle.lm.cfg.d_lm;
    let v = bundle.lm.cfg.vocab_size;
    let mut tokens: Vec<usize> = Vec::new();
    let mut logprob = 0.0;
    while tokens.len() < max_len {
        let mut tape: Tape<f32> = Tape::new();
        let mut binds = Bindings::new();
        let p = tape.constant(prefix.to_vec(), vec![k, d]).unwrap();
        let mut ids = vec![prefixcap::text::BOS];
        ids.extend_from_slice(&tokens);
        let emb = bundle.lm.embed_tokens(&mut tape, &mut binds, &ids).unwrap();
        let inputs = tape.concat_rows(&[p, emb]).unwrap();
        let logits = bundle.lm.forward(&mut tape, &mut binds, inputs).unwrap();
        let t = k + ids.len();
        let row: Vec<f64> = tape.data(logits)[(t - 1) * v..t * v]
            .iter()
            .map(|&x| x as f64)
            .collect();
        let mut best = (0usize, f64::NEG_INFINITY);
        for tok in 0..v {
            let lp = log_softmax_entry(&row, tok);
            if lp > best.1 {
                best = (tok, lp);
            }
        }
        tokens.push(best.0);
        logprob += best.1;
        if best.0 == EOS {
            break;
        }
    }
    (tokens, logprob)
}

#[test]
fn criterion_4_decoding_oracle() {
    let start = Instant::now();
    let vocab = Vocabulary::build(&["aa bb".to_string()]).unwrap(); // V = 6
    let v = vocab.size();
    let max_len = 3;
    let width = v.pow(max_len as u32); // 216
    let mut ok = true;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mapper = Mapper::new(
            MapperConfig {
                kind: MapperKind::Mlp,
                k: 2,
                d_clip: 4,
                d_lm: 8,
                layers: 1,
                heads: 1,
                hidden_mult: 2,
            },
            &mut rng,
        );
        let lm = Lm::new(
            LmConfig {
                vocab_size: v,
                d_lm: 8,
                layers: 1,
                heads: 2,
                max_positions: 8,
            },
            &mut rng,
        );
        let bundle = ModelBundle::new(EncoderConfig { d_clip: 4, seed }, mapper, lm, true);
        let clip: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let prefix = map_to_prefix(&bundle.mapper, &clip).unwrap();

        let full = DecodeConfig { max_len, beam_width: width, length_norm: false };
        let beam = generate_from_prefix(&bundle, &prefix, &full, &vocab).unwrap();
        let exact = exhaustive_best_from_prefix(&bundle, &prefix, max_len, &vocab).unwrap();
        ok &= beam.tokens == exact.tokens && (beam.logprob - exact.logprob).abs() <= 1e-9;

        let one = DecodeConfig { max_len, beam_width: 1, length_norm: false };
        let b1 = generate_from_prefix(&bundle, &prefix, &one, &vocab).unwrap();
        let (gtoks, glp) = greedy_oracle(&bundle, &prefix, max_len);
        ok &= b1.tokens == gtoks && (b1.logprob - glp).abs() <= 1e-12;
    }
    let elapsed = start.elapsed().as_secs_f64();
    ok &= elapsed <= 60.0;
    report(4, "decoding oracle", ok, &format!("100 models ({elapsed:.1}s)"));
}

#[test]
fn criterion_5_end_to_end_learnability() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = pinned_config(dir.path());
    write_pinned_dataset(&cfg);
    let (_, _, scores) = pinned_run(&cfg);
    let elapsed = start.elapsed().as_secs_f64();
    let ok = scores.exact_match >= 0.80 && scores.bleu4 >= 90.0 && elapsed <= 600.0;
    report(
        5,
        "end-to-end learnability",
        ok,
        &format!(
            "exact {:.0}%, BLEU@4 {:.2} ({elapsed:.0}s)",
            scores.exact_match * 100.0,
            scores.bleu4
        ),
    );
}

#[test]
fn criterion_6_fine_tuned_variant() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = pinned_config(dir.path());
    cfg.mapper.kind = MapperKind::Mlp;
    cfg.train.freeze_lm = false;
    write_pinned_dataset(&cfg);
    let (_, _, scores) = pinned_run(&cfg);
    let elapsed = start.elapsed().as_secs_f64();
    let ok = scores.bleu4 >= 90.0 && elapsed <= 600.0;
    report(
        6,
        "fine-tuned variant",
        ok,
        &format!("BLEU@4 {:.2} ({elapsed:.0}s)", scores.bleu4),
    );
}

#[test]
fn criterion_7_prefix_length_trend() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = pinned_config(dir.path());
    cfg.train.epochs = 5;
    cfg.train.lr = 1e-4;
    cfg.train.warmup_steps = 50;
    write_pinned_dataset(&cfg);
    let rows = run_ablation(&cfg, &[1, 2, 5, 10]).unwrap();
    let train_bleu: Vec<f64> = rows
        .iter()
        .filter(|r| r.split == "train")
        .map(|r| r.bleu4)
        .collect();
    let mut inversions = 0;
    let mut worst: f64 = 0.0;
    for w in train_bleu.windows(2) {
        if w[1] < w[0] {
            inversions += 1;
            worst = worst.max(w[0] - w[1]);
        }
    }
    let ok = train_bleu.len() == 4 && (inversions == 0 || (inversions == 1 && worst <= 1.0));
    report(
        7,
        "prefix-length trend",
        ok,
        &format!("train BLEU@4 by K: {train_bleu:.2?}"),
    );
}

#[test]
fn criterion_8_metric_oracles() {
    let s = |x: &str| x.to_string();
    let mut ok = true;

    // Hand-computed pins.
    let bleu_pin = 100.0 * (5.0 / 6.0 * 3.0 / 5.0 * 1.0 / 4.0 * 1e-9_f64).powf(0.25);
    let b = bleu4(
        &[s("the cat sat on the mat")],
        &[vec![s("the cat is on the mat")]],
    )
    .unwrap();
    ok &= (b - bleu_pin).abs() <= 1e-9;

    let r = rouge_l("a b c d", &[s("a c d e")]).unwrap();
    ok &= (r - 0.75).abs() <= 1e-9;

    let corpus = vec![vec![s("a b")], vec![s("a c")], vec![s("b c")]];
    let c = cider(&[s("a c")], &[vec![s("a b")]], &corpus).unwrap();
    ok &= (c - 1.25).abs() <= 1e-9;

    // Maxima on exact matches.
    let cands = vec![s("a small red circle next to a big blue square")];
    let refs = vec![vec![cands[0].clone()]];
    ok &= (bleu4(&cands, &refs).unwrap() - 100.0).abs() <= 1e-9;
    ok &= (rouge_l(&cands[0], &refs[0]).unwrap() - 1.0).abs() <= 1e-9;
    ok &= (cider(&cands, &refs, &refs).unwrap() - 10.0).abs() <= 1e-9;

    report(8, "metric oracles", ok, "3 pins + 3 maxima");
}

#[test]
fn criterion_9_interpretability_contract() {
    let vocab = prefixcap::pipeline::grammar_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let lm: Lm<f32> = Lm::new(
        LmConfig {
            vocab_size: vocab.size(),
            d_lm: 32,
            layers: 1,
            heads: 2,
            max_positions: 16,
        },
        &mut rng,
    );
    let d = lm.cfg.d_lm;
    let mut ok = true;
    for t in 0..vocab.size() {
        let row = lm.tok_emb.data[t * d..(t + 1) * d].to_vec();
        ok &= interpret_prefix(&lm, &row).unwrap()[0].token_id == t;
    }
    // Positive-scaling invariance over 100 random factors on a random row.
    let base: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let reference = interpret_prefix(&lm, &base).unwrap()[0].token_id;
    for _ in 0..100 {
        let scale = 10f32.powf(rng.gen_range(-3.0..3.0));
        let scaled: Vec<f32> = base.iter().map(|x| x * scale).collect();
        ok &= interpret_prefix(&lm, &scaled).unwrap()[0].token_id == reference;
    }
    report(9, "interpretability contract", ok, "identity on all rows, 100 scales");
}

#[test]
fn criterion_10_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pinned_config(dir.path());
    write_pinned_dataset(&cfg);
    let (run_a, caps_a, _) = pinned_run(&cfg);
    let (run_b, caps_b, _) = pinned_run(&cfg);
    let ok = param_bytes(&run_a.bundle) == param_bytes(&run_b.bundle) && caps_a == caps_b;
    report(10, "reproducibility", ok, "bit-identical parameters and captions");
}
