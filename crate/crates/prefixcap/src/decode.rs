//! Caption generation conditioned on the visual prefix: greedy decoding,
//! beam search, and an exhaustive oracle for verification. No KV caching;
//! each step recomputes the full forward pass, which keeps the greedy, beam,
//! and exhaustive paths bit-consistent with each other.

use thiserror::Error;

use crate::lm::log_softmax_entry;
use crate::mapper::map_to_prefix;
use crate::param::Bindings;
use crate::tensor::{Scalar, Tape, TensorError};
use crate::text::{Vocabulary, BOS, EOS};
use crate::train::ModelBundle;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("exhaustive search space {space} exceeds the 10^6 bound")]
    SearchSpaceTooLarge { space: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub max_len: usize,
    /// 1 = greedy.
    pub beam_width: usize,
    pub length_norm: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_len: crate::data_synth::MAX_CAPTION_LEN,
            beam_width: 1,
            length_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Emitted token ids, including the terminating EOS when present.
    pub tokens: Vec<usize>,
    pub caption: String,
    /// Sum of per-token log-probabilities (never length-normalized).
    pub logprob: f64,
}

/// Next-token log-probabilities after the prefix, BOS, and `tokens`.
fn step_logprobs<F: Scalar>(
    bundle: &ModelBundle<F>,
    prefix_data: &[F],
    k: usize,
    tokens: &[usize],
) -> Result<Vec<f64>, TensorError> {
    let d = bundle.lm.cfg.d_lm;
    let v = bundle.lm.cfg.vocab_size;
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let prefix = tape.constant(prefix_data.to_vec(), vec![k, d])?;
    let mut ids = vec![BOS];
    ids.extend_from_slice(tokens);
    let emb = bundle.lm.embed_tokens(&mut tape, &mut binds, &ids)?;
    let inputs = tape.concat_rows(&[prefix, emb])?;
    let logits = bundle.lm.forward(&mut tape, &mut binds, inputs)?;
    let t = k + ids.len();
    let row: Vec<f64> = tape.data(logits)[(t - 1) * v..t * v]
        .iter()
        .map(|&x| x.to_f64())
        .collect();
    let mut out = Vec::with_capacity(v);
    for idx in 0..v {
        out.push(log_softmax_entry(&row, idx));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    logprob: f64,
    finished: bool,
}

impl Beam {
    fn score(&self, length_norm: bool) -> f64 {
        if length_norm && !self.tokens.is_empty() {
            self.logprob / self.tokens.len() as f64
        } else {
            self.logprob
        }
    }
}

/// Generate a caption from a clip vector. beam_width = 1 reduces to greedy
/// argmax with ties broken toward the lowest token id; generation stops at
/// EOS or max_len, whichever comes first.
pub fn generate<F: Scalar>(
    bundle: &ModelBundle<F>,
    clip_vec: &[f64],
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<Generation, DecodeError> {
    let prefix = map_to_prefix(&bundle.mapper, clip_vec)?;
    generate_from_prefix(bundle, &prefix, cfg, vocab)
}

pub fn generate_from_prefix<F: Scalar>(
    bundle: &ModelBundle<F>,
    prefix: &[F],
    cfg: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<Generation, DecodeError> {
    let k = bundle.mapper.cfg().k;
    let v = bundle.lm.cfg.vocab_size;
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    }];
    for _ in 0..cfg.max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            let lps = step_logprobs(bundle, prefix, k, &beam.tokens)?;
            for (tok, &lp) in lps.iter().enumerate().take(v) {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                candidates.push(Beam {
                    tokens,
                    logprob: beam.logprob + lp,
                    finished: tok == EOS,
                });
            }
        }
        // Stable sort: equal scores keep generation order, which enumerates
        // token ids ascending, so the lowest token id wins ties.
        candidates.sort_by(|a, b| {
            b.score(cfg.length_norm)
                .partial_cmp(&a.score(cfg.length_norm))
                .unwrap()
        });
        candidates.truncate(cfg.beam_width);
        beams = candidates;
    }
    let best = &beams[0];
    let caption = vocab
        .decode(&best.tokens)
        .expect("generated ids are always < V");
    Ok(Generation {
        tokens: best.tokens.clone(),
        caption,
        logprob: best.logprob,
    })
}

/// Exact argmax over every token sequence up to max_len (EOS-terminated
/// sequences included), by depth-first enumeration. Verification oracle for
/// beam search; bounded to V^max_len <= 10^6.
pub fn exhaustive_best<F: Scalar>(
    bundle: &ModelBundle<F>,
    clip_vec: &[f64],
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<Generation, DecodeError> {
    let prefix = map_to_prefix(&bundle.mapper, clip_vec)?;
    exhaustive_best_from_prefix(bundle, &prefix, max_len, vocab)
}

pub fn exhaustive_best_from_prefix<F: Scalar>(
    bundle: &ModelBundle<F>,
    prefix: &[F],
    max_len: usize,
    vocab: &Vocabulary,
) -> Result<Generation, DecodeError> {
    let k = bundle.mapper.cfg().k;
    let v = bundle.lm.cfg.vocab_size;
    let space = (v as f64).powi(max_len as i32);
    if space > 1e6 {
        return Err(DecodeError::SearchSpaceTooLarge { space });
    }

    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((tokens, logprob)) = stack.pop() {
        let lps = step_logprobs(bundle, prefix, k, &tokens)?;
        // Descend in reverse token order so lower ids are explored later and
        // (with strict improvement required) earlier-found ties win, matching
        // the beam's lowest-id tie break.
        for tok in (0..v).rev() {
            let lp = logprob + lps[tok];
            let mut seq = tokens.clone();
            seq.push(tok);
            if tok == EOS || seq.len() == max_len {
                let better = match &best {
                    Some((best_seq, best_lp)) => {
                        lp > *best_lp || (lp == *best_lp && seq < *best_seq)
                    }
                    None => true,
                };
                if better {
                    best = Some((seq, lp));
                }
            } else {
                stack.push((seq, lp));
            }
        }
    }
    let (tokens, logprob) = best.expect("search space is non-empty");
    let caption = vocab.decode(&tokens).expect("ids < V");
    Ok(Generation {
        tokens,
        caption,
        logprob,
    })
}
