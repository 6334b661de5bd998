//! Caption-quality metrics: corpus BLEU@4, ROUGE-L, and plain CIDEr
//! (tf-idf n-gram cosine, no length penalty). Tokenization is the text
//! module's lowercased whitespace tokenizer. Everything here is
//! deterministic and permutation-invariant over the candidate/reference
//! pairing order.

use std::collections::HashMap;

use thiserror::Error;

use crate::par::par_map;
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("candidate list must be non-empty")]
    EmptyCandidates,
    #[error("candidates and references must have equal length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("candidate {0} has no references")]
    NoReferences(usize),
}

fn validate(candidates: &[String], references: &[Vec<String>]) -> Result<(), MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCandidates);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch(
            candidates.len(),
            references.len(),
        ));
    }
    for (i, refs) in references.iter().enumerate() {
        if refs.is_empty() {
            return Err(MetricsError::NoReferences(i));
        }
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

const BLEU_EPS: f64 = 1e-9;

/// Corpus-level BLEU@4 in [0, 100]: geometric mean of modified n-gram
/// precisions (n = 1..4, counts clipped against the per-reference maximum)
/// with brevity penalty. Zero precisions are replaced by 1e-9.
pub fn bleu4(candidates: &[String], references: &[Vec<String>]) -> Result<f64, MetricsError> {
    validate(candidates, references)?;
    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        let ctoks = tokenize(cand);
        let rtoks: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
        cand_len += ctoks.len();
        // Effective reference length: closest to the candidate, shorter wins ties.
        let closest = rtoks
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let diff = (l as isize - ctoks.len() as isize).unsigned_abs();
                (diff, l)
            })
            .unwrap();
        ref_len += closest;

        for n in 1..=4 {
            let ccounts = ngram_counts(&ctoks, n);
            let mut max_ref: HashMap<&Vec<String>, usize> = HashMap::new();
            for r in &rtoks {
                for (gram, count) in ngram_counts(r, n) {
                    let entry = ccounts.get_key_value(&gram);
                    if let Some((key, _)) = entry {
                        let slot = max_ref.entry(key).or_insert(0);
                        *slot = (*slot).max(count);
                    }
                }
            }
            for (gram, &count) in &ccounts {
                total[n - 1] += count;
                clipped[n - 1] += count.min(*max_ref.get(gram).unwrap_or(&0));
            }
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if total[n] == 0 || clipped[n] == 0 {
            BLEU_EPS
        } else {
            clipped[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

const ROUGE_BETA_SQ: f64 = 1.2;

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// Longest-common-subsequence F-measure (beta^2 = 1.2), max over references.
pub fn rouge_l(candidate: &str, references: &[String]) -> Result<f64, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::NoReferences(0));
    }
    let ctoks = tokenize(candidate);
    let mut best: f64 = 0.0;
    for r in references {
        let rtoks = tokenize(r);
        if ctoks.is_empty() || rtoks.is_empty() {
            continue;
        }
        let lcs = lcs_len(&ctoks, &rtoks) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / ctoks.len() as f64;
        let r = lcs / rtoks.len() as f64;
        let f = (1.0 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p);
        best = best.max(f);
    }
    Ok(best)
}

/// Mean ROUGE-L over a corpus of instances.
pub fn rouge_l_corpus(
    candidates: &[String],
    references: &[Vec<String>],
) -> Result<f64, MetricsError> {
    validate(candidates, references)?;
    let scores = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l(c, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Plain CIDEr (not CIDEr-D): for n = 1..4, cosine similarity between
/// tf-idf-weighted n-gram vectors of candidate and each reference, averaged
/// over references and over n, times 10. The idf comes from the evaluation
/// reference corpus: idf = ln((N+1)/max(df, 1)) where df counts instances
/// whose reference set contains the n-gram. Cosine with a zero-norm vector
/// on either side is 0.
pub fn cider(
    candidates: &[String],
    references: &[Vec<String>],
    corpus: &[Vec<String>],
) -> Result<f64, MetricsError> {
    validate(candidates, references)?;
    let n_docs = corpus.len().max(1);

    // Document frequencies per n-gram order.
    let mut df: [HashMap<Vec<String>, usize>; 4] = Default::default();
    for refs in corpus {
        for n in 1..=4 {
            let mut seen: HashMap<Vec<String>, ()> = HashMap::new();
            for r in refs {
                for gram in ngram_counts(&tokenize(r), n).into_keys() {
                    seen.entry(gram).or_insert(());
                }
            }
            for gram in seen.into_keys() {
                *df[n - 1].entry(gram).or_insert(0) += 1;
            }
        }
    }
    let idf = |n: usize, gram: &Vec<String>| -> f64 {
        let d = *df[n - 1].get(gram).unwrap_or(&0);
        ((n_docs as f64 + 1.0) / d.max(1) as f64).ln()
    };
    let tfidf = |n: usize, tokens: &[String]| -> HashMap<Vec<String>, f64> {
        ngram_counts(tokens, n)
            .into_iter()
            .map(|(gram, count)| {
                let w = count as f64 * idf(n, &gram);
                (gram, w)
            })
            .collect()
    };

    let pairs: Vec<(String, Vec<String>)> = candidates
        .iter()
        .cloned()
        .zip(references.iter().cloned())
        .collect();
    let scores = par_map(&pairs, |(cand, refs)| {
        let ctoks = tokenize(cand);
        let mut per_n_sum = 0.0;
        for n in 1..=4 {
            let cvec = tfidf(n, &ctoks);
            let cnorm = cvec.values().map(|w| w * w).sum::<f64>().sqrt();
            let mut ref_sum = 0.0;
            for r in refs {
                let rvec = tfidf(n, &tokenize(r));
                let rnorm = rvec.values().map(|w| w * w).sum::<f64>().sqrt();
                if cnorm == 0.0 || rnorm == 0.0 {
                    continue;
                }
                let dot: f64 = cvec
                    .iter()
                    .filter_map(|(gram, w)| rvec.get(gram).map(|rw| w * rw))
                    .sum();
                ref_sum += dot / (cnorm * rnorm);
            }
            per_n_sum += ref_sum / refs.len() as f64;
        }
        10.0 * per_n_sum / 4.0
    });
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
