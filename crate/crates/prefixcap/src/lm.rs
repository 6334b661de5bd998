//! Decoder-only autoregressive transformer language model. Consumes
//! embedding sequences (not token ids) so prefix vectors can be injected,
//! and emits next-token logits under a causal mask. The output projection is
//! tied to the token-embedding table.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::param::{Bindings, Module, Param};
use crate::tensor::{Result, Scalar, Tape, TensorId};
use crate::text::{Vocabulary, BOS, PAD};
use crate::transformer::{AttentionKind, Block, INIT_STD};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 16,
            d_lm: 64,
            layers: 4,
            heads: 4,
            max_positions: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lm<F: Scalar> {
    pub cfg: LmConfig,
    pub tok_emb: Param<F>,
    pub pos_emb: Param<F>,
    pub blocks: Vec<Block<F>>,
    pub lnf_g: Param<F>,
    pub lnf_b: Param<F>,
}

impl<F: Scalar> Lm<F> {
    pub fn new(cfg: LmConfig, rng: &mut impl RngCore) -> Self {
        assert!(cfg.d_lm % cfg.heads == 0, "d_lm must be divisible by heads");
        Lm {
            tok_emb: Param::normal(vec![cfg.vocab_size, cfg.d_lm], INIT_STD, rng),
            pos_emb: Param::normal(vec![cfg.max_positions, cfg.d_lm], INIT_STD, rng),
            blocks: (0..cfg.layers)
                .map(|_| Block::new(cfg.d_lm, cfg.heads, rng))
                .collect(),
            lnf_g: Param::ones(vec![cfg.d_lm]),
            lnf_b: Param::zeros(vec![cfg.d_lm]),
            cfg,
        }
    }

    /// Mark every parameter frozen (or trainable again).
    pub fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut("", &mut |_, p| p.trainable = !frozen);
    }

    /// Embedding lookup for token ids, on-tape.
    pub fn embed_tokens(
        &self,
        tape: &mut Tape<F>,
        binds: &mut Bindings,
        ids: &[usize],
    ) -> Result<TensorId> {
        let table = binds.bind(tape, "lm.tok_emb", &self.tok_emb)?;
        tape.embedding(table, ids)
    }

    /// input_embeddings (t x d_lm) -> logits (t x V). Position embeddings for
    /// 0..t-1 are added inside; causal masking makes logits at position j
    /// depend only on positions <= j.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        binds: &mut Bindings,
        input_embeddings: TensorId,
    ) -> Result<TensorId> {
        let t = tape.shape(input_embeddings)[0];
        let pos_emb = binds.bind(tape, "lm.pos_emb", &self.pos_emb)?;
        let pos = tape.slice_rows(pos_emb, 0, t)?; // errors when t > max_positions
        let mut x = tape.add(input_embeddings, pos)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let name = format!("lm.block{i:02}");
            x = block.forward(tape, binds, &name, x, AttentionKind::Causal)?;
        }
        let lnf_g = binds.bind(tape, "lm.lnf_g", &self.lnf_g)?;
        let lnf_b = binds.bind(tape, "lm.lnf_b", &self.lnf_b)?;
        let x = tape.layer_norm(x, lnf_g, lnf_b)?;
        // Weight-tied output projection.
        let table = binds.bind(tape, "lm.tok_emb", &self.tok_emb)?;
        let table_t = tape.transpose(table)?;
        tape.matmul(x, table_t)
    }

    /// Total log-probability of `ids` under teacher forcing from BOS.
    pub fn sequence_logprob(&self, ids: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&ids[..ids.len() - 1]);
        let emb = self.embed_tokens(&mut tape, &mut binds, &inputs)?;
        let logits = self.forward(&mut tape, &mut binds, emb)?;
        let v = self.cfg.vocab_size;
        let data = tape.data(logits);
        let mut total = 0.0;
        for (j, &target) in ids.iter().enumerate() {
            let row: Vec<f64> = data[j * v..(j + 1) * v].iter().map(|x| x.to_f64()).collect();
            total += log_softmax_entry(&row, target);
        }
        Ok(total)
    }
}

/// log softmax(row)[idx] computed in f64 with max-subtraction.
pub fn log_softmax_entry(row: &[f64], idx: usize) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    row[idx] - lse
}

impl<F: Scalar> Module<F> for Lm<F> {
    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f("lm.tok_emb", &self.tok_emb);
        f("lm.pos_emb", &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("lm.block{i:02}"), f);
        }
        f("lm.lnf_g", &self.lnf_g);
        f("lm.lnf_b", &self.lnf_b);
    }
    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f("lm.tok_emb", &mut self.tok_emb);
        f("lm.pos_emb", &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("lm.block{i:02}"), f);
        }
        f("lm.lnf_g", &mut self.lnf_g);
        f("lm.lnf_b", &mut self.lnf_b);
    }
}

/// Next-token pretraining on caption sequences, so that freezing the LM
/// afterwards is meaningful. Returns the mean loss of the first and last
/// optimizer step.
pub fn pretrain_lm<F: Scalar>(
    lm: &mut Lm<F>,
    vocab: &Vocabulary,
    corpus: &[String],
    steps: usize,
    max_len: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    assert!(!corpus.is_empty(), "pretraining corpus must be non-empty");
    use crate::train::AdamW;
    use rand::seq::SliceRandom;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut opt = AdamW::new(lr, 0.01, 0);
    let mut first_loss = 0.0;
    let mut last_loss = 0.0;
    let mut cursor = corpus.len(); // force an initial shuffle

    // Captions are trained at every position offset the model can later see
    // (a prefix of length up to max_positions - max_len shifts them), so the
    // frozen position embeddings cover prefix-conditioned layouts. The prefix
    // region repeats the caption's own leading tokens: the model learns to
    // read its prefix, which is what lets a mapper steer it after freezing.
    let max_offset = lm.cfg.max_positions - max_len;

    for step in 0..steps {
        if cursor + batch_size > corpus.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..(cursor + batch_size).min(order.len())].to_vec();
        cursor += batch_size;

        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            // Alternate between the bare layout (offset 0) and the full
            // prefix layout (offset max): those are the two layouts seen by
            // likelihood scoring and by prefix-conditioned training.
            let offset = if max_offset == 0 || rng.next_u64() % 2 == 0 {
                0
            } else {
                max_offset
            };
            let seq = vocab
                .encode(&corpus[i], max_len)
                .expect("pretraining caption exceeds max_len");
            let mut inputs: Vec<usize> = seq.ids[..offset.min(seq.live_len)].to_vec();
            inputs.resize(offset, PAD);
            inputs.push(BOS);
            inputs.extend_from_slice(&seq.ids[..max_len - 1]);
            let mut targets = vec![PAD; offset];
            targets.extend_from_slice(&seq.ids);
            let mut mask = vec![false; offset];
            mask.extend((0..max_len).map(|j| j < seq.live_len));
            let emb = lm.embed_tokens(&mut tape, &mut binds, &inputs)?;
            let logits = lm.forward(&mut tape, &mut binds, emb)?;
            losses.push(tape.cross_entropy(logits, &targets, &mask)?);
        }
        let total = tape.concat_scalars_mean(&losses)?;
        tape.backward(total)?;
        let loss = tape.data(total)[0].to_f64();
        if step == 0 {
            first_loss = loss;
        }
        last_loss = loss;
        opt.step(lm, &tape, &binds);
    }
    Ok((first_loss, last_loss))
}
