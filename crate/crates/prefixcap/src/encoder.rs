//! Frozen visual-embedding provider standing in for a pretrained image
//! encoder: a seeded random projection of one-hot attribute blocks, squashed
//! by tanh and L2-normalized. No trainable parameters anywhere in here; no
//! gradient ever flows into this module.

use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data_synth::GrammarConfig;
use crate::param::normal_sample;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("unknown attribute {0:?} for slot {1}")]
    UnknownAttribute(String, usize),
    #[error("expected 6 attributes (size color shape, twice), got {0}")]
    WrongAttributeCount(usize),
    #[error("embedding file line {line}: expected {expected} values, got {got}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("embedding file line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("embedding io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Embedding dimension (>= 8).
    pub d_clip: usize,
    /// Seed for the fixed projection matrix.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_clip: 64,
            seed: 17,
        }
    }
}

/// A synthetic "image": its attribute tuple, ground-truth caption, and
/// frozen dense embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub attributes: Vec<String>,
    pub caption: String,
    pub embedding: Vec<f64>,
}

/// Deterministic embedding of an attribute tuple: one-hot blocks for the six
/// attribute slots, times a fixed seeded dense matrix, tanh, L2-normalize.
pub fn encode_scene(
    cfg: &EncoderConfig,
    grammar: &GrammarConfig,
    attributes: &[String],
) -> Result<Vec<f64>, EncoderError> {
    if attributes.len() != 6 {
        return Err(EncoderError::WrongAttributeCount(attributes.len()));
    }
    let sets: [&[String]; 6] = [
        &grammar.sizes,
        &grammar.colors,
        &grammar.shapes,
        &grammar.sizes,
        &grammar.colors,
        &grammar.shapes,
    ];
    let mut onehot = Vec::new();
    for (slot, (attr, set)) in attributes.iter().zip(sets.iter()).enumerate() {
        let pos = set
            .iter()
            .position(|s| s == attr)
            .ok_or_else(|| EncoderError::UnknownAttribute(attr.clone(), slot))?;
        let mut block = vec![0.0; set.len()];
        block[pos] = 1.0;
        onehot.extend(block);
    }
    let in_dim = onehot.len();
    let proj = projection_matrix(cfg, in_dim);
    let mut out = vec![0.0f64; cfg.d_clip];
    for (i, &x) in onehot.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for j in 0..cfg.d_clip {
            out[j] += x * proj[i * cfg.d_clip + j];
        }
    }
    for v in out.iter_mut() {
        *v = v.tanh();
    }
    let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in out.iter_mut() {
        *v /= norm;
    }
    Ok(out)
}

fn projection_matrix(cfg: &EncoderConfig, in_dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (in_dim as f64).sqrt() * 3.0; // spread pre-tanh values
    (0..in_dim * cfg.d_clip)
        .map(|_| scale * normal_sample(&mut rng))
        .collect()
}

/// Parse a dataset file (data_synth format) into (embedding, caption) pairs.
pub fn load_embeddings(path: &Path) -> Result<Vec<(Vec<f64>, String)>, EncoderError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut expected_dim: Option<usize> = None;
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            // header: #dclip=<n> seed=<s>
            for part in line.trim_start_matches('#').split_whitespace() {
                if let Some(v) = part.strip_prefix("dclip=") {
                    expected_dim = Some(v.parse().map_err(|_| EncoderError::Malformed {
                        line: lineno,
                        msg: format!("bad dclip value {v:?}"),
                    })?);
                }
            }
            continue;
        }
        let (caption, vals) = line.split_once('\t').ok_or_else(|| EncoderError::Malformed {
            line: lineno,
            msg: "missing TAB separator".to_string(),
        })?;
        let mut embedding = Vec::new();
        for v in vals.split(',') {
            embedding.push(v.parse::<f64>().map_err(|_| EncoderError::Malformed {
                line: lineno,
                msg: format!("bad float {v:?}"),
            })?);
        }
        if let Some(d) = expected_dim {
            if embedding.len() != d {
                return Err(EncoderError::DimensionMismatch {
                    line: lineno,
                    expected: d,
                    got: embedding.len(),
                });
            }
        }
        out.push((embedding, caption.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_records, write_dataset};

    fn attrs(g: &GrammarConfig, t: [usize; 6]) -> Vec<String> {
        g.attributes_of(&t)
    }

    #[test]
    fn identical_inputs_give_identical_vectors() {
        let g = GrammarConfig::default();
        let cfg = EncoderConfig::default();
        let a = encode_scene(&cfg, &g, &attrs(&g, [0, 1, 2, 1, 3, 0])).unwrap();
        let b = encode_scene(&cfg, &g, &attrs(&g, [0, 1, 2, 1, 3, 0])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn outputs_are_unit_norm() {
        let g = GrammarConfig::default();
        let cfg = EncoderConfig::default();
        for t in g.all_tuples().into_iter().step_by(5).take(100) {
            let e = encode_scene(&cfg, &g, &attrs(&g, t)).unwrap();
            let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm = {norm}");
        }
    }

    #[test]
    fn one_attribute_difference_separates_embeddings() {
        // Injectivity at desk scale: any pair differing in one attribute has
        // cosine similarity strictly below 1 - 1e-4.
        let g = GrammarConfig::default();
        let cfg = EncoderConfig::default();
        let base = [0, 0, 0, 0, 0, 0];
        let e0 = encode_scene(&cfg, &g, &attrs(&g, base)).unwrap();
        let sets = [2usize, 4, 3, 2, 4, 3];
        for slot in 0..6 {
            for alt in 1..sets[slot] {
                let mut t = base;
                t[slot] = alt;
                let e1 = encode_scene(&cfg, &g, &attrs(&g, t)).unwrap();
                let cos: f64 = e0.iter().zip(&e1).map(|(a, b)| a * b).sum();
                assert!(cos < 1.0 - 1e-4, "slot {slot} alt {alt}: cos = {cos}");
            }
        }
    }

    #[test]
    fn unknown_attribute_is_an_error() {
        let g = GrammarConfig::default();
        let cfg = EncoderConfig::default();
        let mut a = attrs(&g, [0, 0, 0, 0, 0, 0]);
        a[2] = "hexagon".to_string();
        assert!(matches!(
            encode_scene(&cfg, &g, &a),
            Err(EncoderError::UnknownAttribute(..))
        ));
    }

    #[test]
    fn empty_file_loads_as_empty_list() {
        let dir = std::env::temp_dir().join("prefixcap_enc_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.tsv");
        std::fs::write(&path, "").unwrap();
        assert!(load_embeddings(&path).unwrap().is_empty());
    }

    #[test]
    fn write_read_round_trip_preserves_norms() {
        let g = GrammarConfig::default();
        let cfg = EncoderConfig::default();
        let (train, _) = generate_records(3, 100, 1, &g, &cfg).unwrap();
        let dir = std::env::temp_dir().join("prefixcap_enc_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.tsv");
        write_dataset(&path, &train, cfg.d_clip, 3).unwrap();
        let loaded = load_embeddings(&path).unwrap();
        assert_eq!(loaded.len(), train.len());
        for ((emb, cap), rec) in loaded.iter().zip(&train) {
            assert_eq!(cap, &rec.caption);
            assert_eq!(emb, &rec.embedding); // shortest round-trip decimals are exact
            let norm: f64 = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch_names_the_line() {
        let dir = std::env::temp_dir().join("prefixcap_enc_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.tsv");
        std::fs::write(&path, "#dclip=3 seed=0\nfoo\t1.0,2.0\n").unwrap();
        match load_embeddings(&path) {
            Err(EncoderError::DimensionMismatch { line, expected, got }) => {
                assert_eq!((line, expected, got), (2, 3, 2));
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }
}
