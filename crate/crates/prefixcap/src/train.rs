//! Training: prefix-caption sequence assembly, masked cross-entropy over a
//! batch, AdamW with decoupled weight decay, and linear warmup scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::lm::Lm;
use crate::mapper::Mapper;
use crate::param::{Bindings, Module, Param};
use crate::tensor::{Scalar, Tape, TensorId, TensorError};
use crate::text::{TokenSequence, Vocabulary, BOS, PAD};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step}; aborting")]
    NonFiniteLoss { loss: f64, step: usize },
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub freeze_lm: bool,
    pub seed: u64,
    /// Maximal caption length (tokens including EOS).
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 40,
            lr: 2e-5,
            warmup_steps: 5000,
            weight_decay: 0.01,
            freeze_lm: true,
            seed: 0,
            max_len: crate::data_synth::MAX_CAPTION_LEN,
        }
    }
}

/// Encoder config plus the mapper and LM parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<F: Scalar> {
    pub encoder: EncoderConfig,
    pub mapper: Mapper<F>,
    pub lm: Lm<F>,
    pub freeze_lm: bool,
}

impl<F: Scalar> ModelBundle<F> {
    pub fn new(encoder: EncoderConfig, mapper: Mapper<F>, mut lm: Lm<F>, freeze_lm: bool) -> Self {
        lm.set_frozen(freeze_lm);
        ModelBundle {
            encoder,
            mapper,
            lm,
            freeze_lm,
        }
    }
}

impl<F: Scalar> Module<F> for ModelBundle<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.mapper.visit(prefix, f);
        self.lm.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.mapper.visit_mut(prefix, f);
        self.lm.visit_mut(prefix, f);
    }
}

/// One training example: a frozen visual embedding and its tokenized caption.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub embedding: Vec<f64>,
    pub tokens: TokenSequence,
}

impl TrainRecord {
    pub fn from_pairs(
        pairs: &[(Vec<f64>, String)],
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Vec<TrainRecord>, crate::text::TextError> {
        pairs
            .iter()
            .map(|(embedding, caption)| {
                Ok(TrainRecord {
                    embedding: embedding.clone(),
                    tokens: vocab.encode(caption, max_len)?,
                })
            })
            .collect()
    }
}

/// Assemble the prefix-caption input sequence with its targets and loss mask.
///
/// Inputs are the k prefix rows followed by embeddings of BOS and the first
/// max_len-1 caption tokens. Targets at caption positions are the caption
/// tokens themselves; the mask is false at every prefix position and at PAD
/// targets, true at live caption targets including EOS.
pub fn build_sequence<F: Scalar>(
    tape: &mut Tape<F>,
    binds: &mut Bindings,
    lm: &Lm<F>,
    prefix: TensorId,
    caption: &TokenSequence,
) -> Result<(TensorId, Vec<usize>, Vec<bool>), TensorError> {
    let k = tape.shape(prefix)[0];
    let max_len = caption.ids.len();
    let mut input_ids = Vec::with_capacity(max_len);
    input_ids.push(BOS);
    input_ids.extend_from_slice(&caption.ids[..max_len - 1]);
    let caption_emb = lm.embed_tokens(tape, binds, &input_ids)?;
    let inputs = tape.concat_rows(&[prefix, caption_emb])?;

    let mut targets = vec![PAD; k];
    targets.extend_from_slice(&caption.ids);
    let mut mask = vec![false; k];
    for j in 0..max_len {
        mask.push(j < caption.live_len);
    }
    Ok((inputs, targets, mask))
}

/// Per-record loss: encoder embedding -> mapper -> sequence -> LM -> masked CE.
pub fn record_loss<F: Scalar>(
    tape: &mut Tape<F>,
    binds: &mut Bindings,
    bundle: &ModelBundle<F>,
    record: &TrainRecord,
) -> Result<TensorId, TensorError> {
    let clip = tape.constant(
        record.embedding.iter().map(|&v| F::from_f64(v)).collect(),
        vec![1, record.embedding.len()],
    )?;
    let prefix = bundle.mapper.forward(tape, binds, clip)?;
    let (inputs, targets, mask) = build_sequence(tape, binds, &bundle.lm, prefix, &record.tokens)?;
    let logits = bundle.lm.forward(tape, binds, inputs)?;
    tape.cross_entropy(logits, &targets, &mask)
}

/// Linear ramp 0 -> lr over warmup_steps, constant afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.lr
    } else {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
/// Moments are kept in f64 regardless of the parameter precision.
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, _step_offset: u64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Apply one update from the gradients recorded on `tape` to every
    /// trainable parameter that was bound this step.
    pub fn step<F: Scalar, M: Module<F>>(&mut self, model: &mut M, tape: &Tape<F>, binds: &Bindings) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        model.visit_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let grad = match binds.grad_of(tape, name) {
                Some(g) => g,
                None => return,
            };
            let (m, v) = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.data.len()], vec![0.0; p.data.len()]));
            for i in 0..p.data.len() {
                let g = grad[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let x = p.data[i].to_f64();
                let updated = x - self.lr * (mhat / (vhat.sqrt() + self.eps))
                    - self.lr * self.weight_decay * x;
                p.data[i] = F::from_f64(updated);
            }
        });
    }
}

/// One optimizer step on a batch. Returns the batch-mean loss.
pub fn training_step<F: Scalar>(
    bundle: &mut ModelBundle<F>,
    batch: &[TrainRecord],
    cfg: &TrainConfig,
    opt: &mut AdamW,
    step: usize,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let mut losses = Vec::with_capacity(batch.len());
    for record in batch {
        losses.push(record_loss(&mut tape, &mut binds, bundle, record)?);
    }
    let total = tape.concat_scalars_mean(&losses)?;
    let loss = tape.data(total)[0].to_f64();
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { loss, step });
    }
    tape.backward(total)?;
    opt.lr = lr_at(step, cfg);
    opt.step(bundle, &tape, &binds);
    Ok(loss)
}

/// Full training loop: shuffle per epoch with the run seed, drop the last
/// partial batch. Returns the (step, lr, loss) log.
pub fn train<F: Scalar>(
    bundle: &mut ModelBundle<F>,
    records: &[TrainRecord],
    cfg: &TrainConfig,
) -> Result<Vec<(usize, f64, f64)>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, 0);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                break;
            }
            let batch: Vec<TrainRecord> = chunk.iter().map(|&i| records[i].clone()).collect();
            let loss = training_step(bundle, &batch, cfg, &mut opt, step)?;
            log.push((step, lr_at(step, cfg), loss));
            step += 1;
        }
    }
    Ok(log)
}

/// Serialize a module's parameters to bytes (f64 LE per entry, visit order).
/// Used for freeze-contract byte comparisons.
pub fn param_bytes<F: Scalar>(module: &impl Module<F>) -> Vec<u8> {
    let mut out = Vec::new();
    module.visit("", &mut |_, p| {
        for &x in &p.data {
            out.extend_from_slice(&x.to_f64().to_le_bytes());
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_records, GrammarConfig, MAX_CAPTION_LEN};
    use crate::lm::{log_softmax_entry, LmConfig};
    use crate::mapper::{MapperConfig, MapperKind};

    fn small_bundle(freeze_lm: bool, seed: u64, kind: MapperKind, k: usize) -> (ModelBundle<f32>, Vocabulary, Vec<TrainRecord>) {
        let grammar = GrammarConfig::default();
        let enc = EncoderConfig {
            d_clip: 16,
            seed: 5,
        };
        let vocab = Vocabulary::build(&grammar.all_captions()).unwrap();
        let (scenes, _) = generate_records(seed, 32, 1, &grammar, &enc).unwrap();
        let pairs: Vec<(Vec<f64>, String)> = scenes
            .iter()
            .map(|r| (r.embedding.clone(), r.caption.clone()))
            .collect();
        let records = TrainRecord::from_pairs(&pairs, &vocab, MAX_CAPTION_LEN).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mcfg = MapperConfig {
            kind,
            k,
            d_clip: 16,
            d_lm: 32,
            layers: 2,
            heads: 2,
            hidden_mult: 4,
        };
        let mapper = Mapper::new(mcfg, &mut rng);
        let lm = Lm::new(
            LmConfig {
                vocab_size: vocab.size(),
                d_lm: 32,
                layers: 2,
                heads: 2,
                max_positions: k + MAX_CAPTION_LEN,
            },
            &mut rng,
        );
        (
            ModelBundle::new(enc, mapper, lm, freeze_lm),
            vocab,
            records,
        )
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default(); // lr 2e-5, warmup 5000
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(2500, &cfg) - 1e-5).abs() < 1e-15);
        assert_eq!(lr_at(5000, &cfg), 2e-5);
        assert_eq!(lr_at(99_999, &cfg), 2e-5);
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_identity() {
        struct One(Param<f64>);
        impl Module<f64> for One {
            fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
                f("p", &self.0);
            }
            fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
                f("p", &mut self.0);
            }
        }
        let mut m = One(Param {
            data: vec![1.5, -2.0],
            shape: vec![2],
            trainable: true,
        });
        let mut tape: Tape<f64> = Tape::new();
        let mut binds = Bindings::new();
        let id = binds.bind(&mut tape, "p", &m.0).unwrap();
        let loss = tape.scale(id, 0.0).unwrap();
        let loss = tape.sum(loss).unwrap();
        tape.backward(loss).unwrap();

        let mut opt = AdamW::new(0.1, 0.0, 0);
        opt.step(&mut m, &tape, &binds);
        assert_eq!(m.0.data, vec![1.5, -2.0]);

        // With wd > 0 and zero grad the parameter shrinks by (1 - lr*wd).
        let mut opt = AdamW::new(0.1, 0.5, 0);
        opt.step(&mut m, &tape, &binds);
        assert_eq!(m.0.data, vec![1.5 - 0.1 * 0.5 * 1.5, -2.0 - 0.1 * 0.5 * -2.0]);
    }

    #[test]
    fn adamw_first_step_matches_scalar_reference() {
        // 10-line scalar reference for one step from m = v = 0.
        fn reference(x: f64, g: f64, lr: f64, wd: f64) -> f64 {
            let (b1, b2, eps) = (0.9, 0.999, 1e-8);
            let m = (1.0 - b1) * g;
            let v = (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1);
            let vhat = v / (1.0 - b2);
            x - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * x
        }
        struct One(Param<f64>);
        impl Module<f64> for One {
            fn visit(&self, _: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
                f("p", &self.0);
            }
            fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
                f("p", &mut self.0);
            }
        }
        let mut m = One(Param {
            data: vec![0.7, -1.3, 4.0],
            shape: vec![3],
            trainable: true,
        });
        // loss = sum(p * c) so grad = c
        let c = [2.0, -0.5, 0.001];
        let mut tape: Tape<f64> = Tape::new();
        let mut binds = Bindings::new();
        let id = binds.bind(&mut tape, "p", &m.0).unwrap();
        let cid = tape.constant(c.to_vec(), vec![3]).unwrap();
        let prod = tape.mul(id, cid).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();

        let before = m.0.data.clone();
        let mut opt = AdamW::new(0.01, 0.02, 0);
        opt.step(&mut m, &tape, &binds);
        for i in 0..3 {
            let want = reference(before[i], c[i], 0.01, 0.02);
            assert!((m.0.data[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn build_sequence_mask_matches_definition() {
        // k=2, caption [a, EOS, PAD]: length 5, mask [F,F,T,T,F]
        let (bundle, vocab, _) = small_bundle(true, 0, MapperKind::Mlp, 2);
        let seq = vocab.encode("a", 3).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let mut binds = Bindings::new();
        let prefix = tape
            .constant(vec![0.0; 2 * 32], vec![2, 32])
            .unwrap();
        let (inputs, targets, mask) =
            build_sequence(&mut tape, &mut binds, &bundle.lm, prefix, &seq).unwrap();
        assert_eq!(tape.shape(inputs), &[5, 32]);
        assert_eq!(mask, vec![false, false, true, true, false]);
        assert_eq!(targets[2], vocab.id_of("a").unwrap());
        assert_eq!(targets[3], crate::text::EOS);
        assert_eq!(targets[4], PAD);
    }

    #[test]
    fn all_pad_caption_raises_empty_loss() {
        let (bundle, _, _) = small_bundle(true, 0, MapperKind::Mlp, 2);
        let seq = TokenSequence {
            ids: vec![PAD; 4],
            live_len: 0,
        };
        let mut tape: Tape<f32> = Tape::new();
        let mut binds = Bindings::new();
        let prefix = tape.constant(vec![0.0; 2 * 32], vec![2, 32]).unwrap();
        let (inputs, targets, mask) =
            build_sequence(&mut tape, &mut binds, &bundle.lm, prefix, &seq).unwrap();
        let logits = bundle.lm.forward(&mut tape, &mut binds, inputs).unwrap();
        assert!(matches!(
            tape.cross_entropy(logits, &targets, &mask),
            Err(TensorError::EmptyLoss)
        ));
    }

    #[test]
    fn masked_loss_equals_hand_computed_nll() {
        let (bundle, _, records) = small_bundle(true, 1, MapperKind::Mlp, 4);
        for record in records.iter().take(100) {
            let mut tape: Tape<f32> = Tape::new();
            let mut binds = Bindings::new();
            let clip = tape
                .constant(
                    record.embedding.iter().map(|&v| v as f32).collect(),
                    vec![1, record.embedding.len()],
                )
                .unwrap();
            let prefix = bundle.mapper.forward(&mut tape, &mut binds, clip).unwrap();
            let (inputs, targets, mask) =
                build_sequence(&mut tape, &mut binds, &bundle.lm, prefix, &record.tokens).unwrap();
            let logits = bundle.lm.forward(&mut tape, &mut binds, inputs).unwrap();
            let loss = tape.cross_entropy(logits, &targets, &mask).unwrap();
            let got = tape.data(loss)[0] as f64;

            // Independent scalar recomputation over the live positions.
            let v = bundle.lm.cfg.vocab_size;
            let data = tape.data(logits);
            let mut sum = 0.0;
            let mut count = 0;
            for (i, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
                if !m {
                    continue;
                }
                let row: Vec<f64> = data[i * v..(i + 1) * v].iter().map(|&x| x as f64).collect();
                sum += -log_softmax_entry(&row, t);
                count += 1;
            }
            let want = sum / count as f64;
            assert!((got - want).abs() < 1e-4, "got {got}, want {want}");
        }
    }

    #[test]
    fn fully_frozen_bundle_keeps_loss_constant() {
        let (mut bundle, _, records) = small_bundle(true, 2, MapperKind::Mlp, 4);
        bundle.lm.set_frozen(true);
        bundle.mapper.visit_mut("", &mut |_, p| p.trainable = false);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 1e-2,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, 0);
        let batch = records[..4].to_vec();
        let l1 = training_step(&mut bundle, &batch, &cfg, &mut opt, 0).unwrap();
        let l2 = training_step(&mut bundle, &batch, &cfg, &mut opt, 1).unwrap();
        let l3 = training_step(&mut bundle, &batch, &cfg, &mut opt, 2).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(l2, l3);
    }

    #[test]
    fn freeze_lm_keeps_lm_bytes_identical_while_mapper_moves() {
        let (mut bundle, _, records) = small_bundle(true, 3, MapperKind::Mlp, 4);
        let lm_before = param_bytes(&bundle.lm);
        let mapper_before = param_bytes(&bundle.mapper);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr: 1e-3,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, 0);
        for step in 0..100 {
            let batch = records[..4].to_vec();
            training_step(&mut bundle, &batch, &cfg, &mut opt, step).unwrap();
        }
        assert_eq!(lm_before, param_bytes(&bundle.lm));
        assert_ne!(mapper_before, param_bytes(&bundle.mapper));
    }

    #[test]
    fn single_batch_overfit_drives_loss_down() {
        // Fine-tune the LM too; a frozen random LM cannot be steered to
        // near-zero loss by the mapper alone.
        let (mut bundle, _, records) = small_bundle(false, 4, MapperKind::Mlp, 4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 3e-3,
            warmup_steps: 20,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, 0);
        let batch = records[..8].to_vec();
        let mut last = f64::INFINITY;
        for step in 0..300 {
            last = training_step(&mut bundle, &batch, &cfg, &mut opt, step).unwrap();
        }
        assert!(last < 0.05, "final loss {last}");
    }

    #[test]
    fn training_is_reproducible_for_fixed_seed() {
        let losses = |seed| {
            let (mut bundle, _, records) = small_bundle(true, seed, MapperKind::Mlp, 4);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 8,
                lr: 1e-3,
                warmup_steps: 5,
                seed: 99,
                ..Default::default()
            };
            train(&mut bundle, &records, &cfg).unwrap()
        };
        let a = losses(7);
        let b = losses(7);
        assert_eq!(a, b); // bit-identical loss trajectory
    }
}
