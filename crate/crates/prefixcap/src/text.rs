//! Word-level vocabulary and padded caption token sequences.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

pub const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum TextError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("caption has {tokens} tokens but max length is {max} (including EOS); refusing to truncate")]
    CaptionTooLong { tokens: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("vocabulary io: {0}")]
    Io(#[from] std::io::Error),
}

/// Token strings mapped to contiguous ids; ids 0..4 are PAD/BOS/EOS/UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>, // non-reserved tokens, index = id - NUM_RESERVED
}

impl Vocabulary {
    /// Whitespace-split, lowercased, lexicographically sorted for
    /// deterministic ids across runs and platforms.
    pub fn build(corpus: &[String]) -> Result<Self, TextError> {
        if corpus.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut set = BTreeSet::new();
        for caption in corpus {
            for tok in tokenize(caption) {
                set.insert(tok);
            }
        }
        Ok(Vocabulary {
            words: set.into_iter().collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.words.len() + NUM_RESERVED
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.words
            .binary_search_by(|w| w.as_str().cmp(token))
            .ok()
            .map(|i| i + NUM_RESERVED)
    }

    pub fn token_of(&self, id: usize) -> Result<&str, TextError> {
        if id < NUM_RESERVED {
            Ok(RESERVED_NAMES[id])
        } else if id < self.size() {
            Ok(&self.words[id - NUM_RESERVED])
        } else {
            Err(TextError::IdOutOfRange {
                id,
                size: self.size(),
            })
        }
    }

    /// Token ids followed by EOS, PAD-padded to `max_len`.
    pub fn encode(&self, caption: &str, max_len: usize) -> Result<TokenSequence, TextError> {
        let tokens = tokenize(caption);
        if tokens.len() + 1 > max_len {
            return Err(TextError::CaptionTooLong {
                tokens: tokens.len(),
                max: max_len,
            });
        }
        let mut ids = Vec::with_capacity(max_len);
        for tok in &tokens {
            ids.push(self.id_of(tok).unwrap_or(UNK));
        }
        ids.push(EOS);
        let live_len = ids.len();
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids, live_len })
    }

    /// Inverse of encode up to whitespace normalization; stops at EOS.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TextError> {
        let mut words = Vec::new();
        for &id in ids {
            if id >= self.size() {
                return Err(TextError::IdOutOfRange {
                    id,
                    size: self.size(),
                });
            }
            if id == EOS {
                break;
            }
            if id == PAD {
                continue;
            }
            words.push(self.token_of(id)?.to_string());
        }
        Ok(words.join(" "))
    }

    /// One token per line; line number = id - 4 (reserved ids implicit).
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for w in &self.words {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut words = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.is_empty() {
                words.push(line);
            }
        }
        Ok(Vocabulary { words })
    }
}

/// Padded caption token sequence of fixed maximal length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Count of non-PAD tokens; the last live token is EOS.
    pub live_len: usize,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}
