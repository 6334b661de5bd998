//! Prefix interpretability: render each prefix embedding as its nearest
//! vocabulary token under cosine similarity against the LM embedding table.

use thiserror::Error;

use crate::lm::Lm;
use crate::tensor::Scalar;
use crate::text::UNK;

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("prefix width {got} does not match the LM embedding width {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("prefix_overlap needs at least one interpretation")]
    EmptyInput,
    #[error("prefix_overlap inputs must share the same k (got {0} and {1})")]
    UnequalK(usize, usize),
}

/// One interpreted prefix slot: the nearest token id, flagged when the
/// prefix row had zero norm (cosine undefined; mapped to UNK).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotInterpretation {
    pub token_id: usize,
    pub zero_norm: bool,
}

/// For each prefix row, the argmax over vocabulary of cosine similarity with
/// the embedding-table rows. Ties break toward the lowest token id.
pub fn interpret_prefix<F: Scalar>(
    lm: &Lm<F>,
    prefix: &[F],
) -> Result<Vec<SlotInterpretation>, InterpretError> {
    let d = lm.cfg.d_lm;
    if prefix.len() % d != 0 {
        return Err(InterpretError::WidthMismatch {
            got: prefix.len(),
            want: d,
        });
    }
    let v = lm.cfg.vocab_size;
    let table: Vec<f64> = lm.tok_emb.data.iter().map(|x| x.to_f64()).collect();
    let table_norms: Vec<f64> = (0..v)
        .map(|t| table[t * d..(t + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();

    let k = prefix.len() / d;
    let mut out = Vec::with_capacity(k);
    for slot in 0..k {
        let row: Vec<f64> = prefix[slot * d..(slot + 1) * d]
            .iter()
            .map(|x| x.to_f64())
            .collect();
        let row_norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if row_norm == 0.0 {
            out.push(SlotInterpretation {
                token_id: UNK,
                zero_norm: true,
            });
            continue;
        }
        let mut best_tok = 0;
        let mut best_cos = f64::NEG_INFINITY;
        for t in 0..v {
            let denom = row_norm * table_norms[t];
            let cos = if denom == 0.0 {
                0.0
            } else {
                let dot: f64 = row.iter().zip(&table[t * d..(t + 1) * d]).map(|(a, b)| a * b).sum();
                dot / denom
            };
            if cos > best_cos {
                best_cos = cos;
                best_tok = t;
            }
        }
        out.push(SlotInterpretation {
            token_id: best_tok,
            zero_norm: false,
        });
    }
    Ok(out)
}

/// Fraction of slot positions whose interpreted token is identical across
/// all inputs.
pub fn prefix_overlap(interpretations: &[Vec<SlotInterpretation>]) -> Result<f64, InterpretError> {
    let first = interpretations.first().ok_or(InterpretError::EmptyInput)?;
    let k = first.len();
    for other in &interpretations[1..] {
        if other.len() != k {
            return Err(InterpretError::UnequalK(k, other.len()));
        }
    }
    let mut shared = 0;
    for slot in 0..k {
        let tok = first[slot].token_id;
        if interpretations.iter().all(|i| i[slot].token_id == tok) {
            shared += 1;
        }
    }
    Ok(shared as f64 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lm(v: usize, d: usize, seed: u64) -> Lm<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Lm::new(
            LmConfig {
                vocab_size: v,
                d_lm: d,
                layers: 1,
                heads: 2,
                max_positions: 4,
            },
            &mut rng,
        )
    }

    #[test]
    fn embedding_rows_interpret_as_themselves() {
        let lm = lm(12, 8, 0);
        let d = 8;
        for t in 0..12 {
            let row = lm.tok_emb.data[t * d..(t + 1) * d].to_vec();
            let interp = interpret_prefix(&lm, &row).unwrap();
            assert_eq!(interp[0].token_id, t);
            assert!(!interp[0].zero_norm);
        }
    }

    #[test]
    fn cosine_argmax_is_scale_invariant() {
        let lm = lm(12, 8, 1);
        let d = 8;
        let row: Vec<f64> = lm.tok_emb.data[5 * d..6 * d].iter().map(|x| x * 2.5).collect();
        let interp = interpret_prefix(&lm, &row).unwrap();
        assert_eq!(interp[0].token_id, 5);
    }

    #[test]
    fn zero_norm_rows_map_to_unk_with_flag() {
        let lm = lm(12, 8, 2);
        let interp = interpret_prefix(&lm, &vec![0.0; 8]).unwrap();
        assert_eq!(interp[0].token_id, UNK);
        assert!(interp[0].zero_norm);
    }

    #[test]
    fn matches_brute_force_double_loop() {
        let lm = lm(40, 8, 3);
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let row: Vec<f64> = (0..d).map(|_| crate::param::normal_sample(&mut rng)).collect();
            let got = interpret_prefix(&lm, &row).unwrap()[0].token_id;

            // Brute force, independent arithmetic path.
            let mut best = (0usize, f64::NEG_INFINITY);
            for t in 0..40 {
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for j in 0..d {
                    let a = row[j];
                    let b = lm.tok_emb.data[t * d + j];
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
                let cos = dot / (na.sqrt() * nb.sqrt());
                if cos > best.1 {
                    best = (t, cos);
                }
            }
            assert_eq!(got, best.0);
        }
    }

    #[test]
    fn overlap_extremes() {
        let a = vec![
            SlotInterpretation { token_id: 4, zero_norm: false },
            SlotInterpretation { token_id: 5, zero_norm: false },
        ];
        let b = a.clone();
        assert_eq!(prefix_overlap(&[a.clone(), b]).unwrap(), 1.0);
        let c = vec![
            SlotInterpretation { token_id: 6, zero_norm: false },
            SlotInterpretation { token_id: 7, zero_norm: false },
        ];
        assert_eq!(prefix_overlap(&[a, c]).unwrap(), 0.0);
        assert!(matches!(prefix_overlap(&[]), Err(InterpretError::EmptyInput)));
    }
}
