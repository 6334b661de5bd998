//! Procedural two-object captioning dataset over a closed attribute grammar.
//!
//! Captions follow the template
//! "a <size> <color> <shape> next to a <size> <color> <shape>", which keeps
//! the mapping compositional: the default grammar has (2*4*3)^2 = 576
//! distinct scenes, far more than any lookup table a small mapper could
//! memorize slot by slot.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::{encode_scene, EncoderConfig, SceneRecord};

/// Maximum caption length in tokens including the appended EOS.
/// The template is 10 tokens, leaving an EOS slot plus margin.
pub const MAX_CAPTION_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("grammar attribute sets must be non-empty")]
    EmptyGrammar,
    #[error("requested {requested} scenes but the grammar only has {available} distinct tuples")]
    NotEnoughScenes { requested: usize, available: usize },
    #[error("n_train and n_test must be >= 1")]
    EmptySplit,
    #[error("caption {0:?} does not parse under the grammar")]
    UnparseableCaption(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarConfig {
    pub sizes: Vec<String>,
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            sizes: vec!["small".into(), "big".into()],
            colors: vec!["red".into(), "blue".into(), "green".into(), "yellow".into()],
            shapes: vec!["circle".into(), "square".into(), "triangle".into()],
        }
    }
}

/// A scene is two (size, color, shape) objects, stored as indices into the
/// grammar's sets.
pub type SceneTuple = [usize; 6];

impl GrammarConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.sizes.is_empty() || self.colors.is_empty() || self.shapes.is_empty() {
            return Err(DataError::EmptyGrammar);
        }
        Ok(())
    }

    pub fn num_tuples(&self) -> usize {
        let per_object = self.sizes.len() * self.colors.len() * self.shapes.len();
        per_object * per_object
    }

    pub fn all_tuples(&self) -> Vec<SceneTuple> {
        let mut out = Vec::with_capacity(self.num_tuples());
        for s1 in 0..self.sizes.len() {
            for c1 in 0..self.colors.len() {
                for h1 in 0..self.shapes.len() {
                    for s2 in 0..self.sizes.len() {
                        for c2 in 0..self.colors.len() {
                            for h2 in 0..self.shapes.len() {
                                out.push([s1, c1, h1, s2, c2, h2]);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn attributes_of(&self, t: &SceneTuple) -> Vec<String> {
        vec![
            self.sizes[t[0]].clone(),
            self.colors[t[1]].clone(),
            self.shapes[t[2]].clone(),
            self.sizes[t[3]].clone(),
            self.colors[t[4]].clone(),
            self.shapes[t[5]].clone(),
        ]
    }

    pub fn caption_of(&self, t: &SceneTuple) -> String {
        format!(
            "a {} {} {} next to a {} {} {}",
            self.sizes[t[0]],
            self.colors[t[1]],
            self.shapes[t[2]],
            self.sizes[t[3]],
            self.colors[t[4]],
            self.shapes[t[5]],
        )
    }

    /// Inverse of caption_of; the grammar is invertible by construction.
    pub fn parse_caption(&self, caption: &str) -> Result<SceneTuple, DataError> {
        let toks: Vec<&str> = caption.split_whitespace().collect();
        let bad = || DataError::UnparseableCaption(caption.to_string());
        if toks.len() != 10 || toks[0] != "a" || toks[4] != "next" || toks[5] != "to" || toks[6] != "a"
        {
            return Err(bad());
        }
        let find = |set: &[String], w: &str| set.iter().position(|s| s == w);
        Ok([
            find(&self.sizes, toks[1]).ok_or_else(bad)?,
            find(&self.colors, toks[2]).ok_or_else(bad)?,
            find(&self.shapes, toks[3]).ok_or_else(bad)?,
            find(&self.sizes, toks[7]).ok_or_else(bad)?,
            find(&self.colors, toks[8]).ok_or_else(bad)?,
            find(&self.shapes, toks[9]).ok_or_else(bad)?,
        ])
    }

    /// Every caption the grammar can produce; the vocabulary corpus.
    pub fn all_captions(&self) -> Vec<String> {
        self.all_tuples().iter().map(|t| self.caption_of(t)).collect()
    }
}

/// Sample disjoint train/test scene sets and build their records.
pub fn generate_records(
    seed: u64,
    n_train: usize,
    n_test: usize,
    grammar: &GrammarConfig,
    enc: &EncoderConfig,
) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>), DataError> {
    grammar.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(DataError::EmptySplit);
    }
    let mut tuples = grammar.all_tuples();
    if n_train + n_test > tuples.len() {
        return Err(DataError::NotEnoughScenes {
            requested: n_train + n_test,
            available: tuples.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tuples.shuffle(&mut rng);

    let make = |t: &SceneTuple| -> Result<SceneRecord, DataError> {
        let attributes = grammar.attributes_of(t);
        let embedding = encode_scene(enc, grammar, &attributes)?;
        Ok(SceneRecord {
            attributes,
            caption: grammar.caption_of(t),
            embedding,
        })
    };
    let train = tuples[..n_train]
        .iter()
        .map(make)
        .collect::<Result<Vec<_>, _>>()?;
    let test = tuples[n_train..n_train + n_test]
        .iter()
        .map(make)
        .collect::<Result<Vec<_>, _>>()?;
    Ok((train, test))
}

/// Dataset file: header `#dclip=<n> seed=<s>`, then one record per line,
/// `caption<TAB>v1,v2,...` with shortest round-trip decimals.
pub fn write_dataset(path: &Path, records: &[SceneRecord], d_clip: usize, seed: u64) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "#dclip={d_clip} seed={seed}")?;
    for r in records {
        let vals: Vec<String> = r.embedding.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}\t{}", r.caption, vals.join(","))?;
    }
    Ok(())
}

/// Generate train/test splits and write both dataset files.
pub fn generate_dataset(
    seed: u64,
    n_train: usize,
    n_test: usize,
    grammar: &GrammarConfig,
    enc: &EncoderConfig,
    train_path: &Path,
    test_path: &Path,
) -> Result<(), DataError> {
    let (train, test) = generate_records(seed, n_train, n_test, grammar, enc)?;
    write_dataset(train_path, &train, enc.d_clip, seed)?;
    write_dataset(test_path, &test, enc.d_clip, seed)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn default_grammar_has_576_tuples() {
        let g = GrammarConfig::default();
        assert_eq!(g.num_tuples(), 576);
        assert_eq!(g.all_tuples().len(), 576);
    }

    #[test]
    fn caption_parses_back_to_its_tuple() {
        let g = GrammarConfig::default();
        for t in g.all_tuples() {
            assert_eq!(g.parse_caption(&g.caption_of(&t)).unwrap(), t);
        }
    }

    #[test]
    fn single_record_is_well_formed() {
        let g = GrammarConfig::default();
        let enc = EncoderConfig::default();
        let (train, test) = generate_records(7, 1, 1, &g, &enc).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(test.len(), 1);
        assert_eq!(train[0].embedding.len(), enc.d_clip);
        assert_eq!(train[0].attributes.len(), 6);
    }

    #[test]
    fn train_and_test_tuples_are_disjoint() {
        let g = GrammarConfig::default();
        let enc = EncoderConfig::default();
        let (train, test) = generate_records(11, 400, 100, &g, &enc).unwrap();
        let train_caps: HashSet<&str> = train.iter().map(|r| r.caption.as_str()).collect();
        assert_eq!(train_caps.len(), 400);
        for r in &test {
            assert!(!train_caps.contains(r.caption.as_str()));
        }
    }

    #[test]
    fn oversized_request_is_rejected() {
        let g = GrammarConfig::default();
        let enc = EncoderConfig::default();
        assert!(matches!(
            generate_records(1, 500, 100, &g, &enc),
            Err(DataError::NotEnoughScenes { .. })
        ));
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let g = GrammarConfig::default();
        let enc = EncoderConfig::default();
        let dir = std::env::temp_dir().join("prefixcap_dataset_test");
        std::fs::create_dir_all(&dir).unwrap();
        let (a, b) = (dir.join("a.tsv"), dir.join("b.tsv"));
        let (a2, b2) = (dir.join("a2.tsv"), dir.join("b2.tsv"));
        generate_dataset(42, 10, 5, &g, &enc, &a, &b).unwrap();
        generate_dataset(42, 10, 5, &g, &enc, &a2, &b2).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&a2).unwrap());
        assert_eq!(std::fs::read(&b).unwrap(), std::fs::read(&b2).unwrap());
    }
}
