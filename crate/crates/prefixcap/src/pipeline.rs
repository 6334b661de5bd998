//! End-to-end runs shared by the CLI and integration tests: vocabulary and
//! LM pretraining over the grammar corpus, mapper training on a dataset,
//! caption generation, metric evaluation, and the prefix-length ablation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data_synth::GrammarConfig;
use crate::decode::{generate, DecodeConfig, DecodeError, Generation};
use crate::encoder::{load_embeddings, EncoderError};
use crate::lm::{pretrain_lm, Lm};
use crate::mapper::Mapper;
use crate::metrics::{bleu4, cider, rouge_l_corpus, MetricsError};
use crate::par::par_map;
use crate::text::{TextError, Vocabulary};
use crate::train::{train, ModelBundle, TrainError, TrainRecord};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] crate::data_synth::DataError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// The vocabulary over every caption the default grammar can produce; also
/// the LM pretraining corpus.
pub fn grammar_vocabulary() -> Vocabulary {
    Vocabulary::build(&GrammarConfig::default().all_captions())
        .expect("default grammar corpus is non-empty")
}

/// A trained model with its vocabulary and the (step, lr, loss) log.
pub struct TrainedRun {
    pub bundle: ModelBundle<f32>,
    pub vocab: Vocabulary,
    pub log: Vec<(usize, f64, f64)>,
}

/// Initialize the LM from the model seed, pretrain it on the grammar corpus,
/// then initialize the mapper from the same RNG stream.
fn init_models(
    cfg: &RunConfig,
    vocab: &Vocabulary,
) -> Result<(Mapper<f32>, Lm<f32>), PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed);
    let mut lm: Lm<f32> = Lm::new(cfg.lm_config(vocab.size()), &mut rng);
    if cfg.pretrain_steps > 0 {
        pretrain_lm(
            &mut lm,
            vocab,
            &GrammarConfig::default().all_captions(),
            cfg.pretrain_steps,
            cfg.train.max_len,
            cfg.pretrain_batch_size,
            cfg.pretrain_lr,
            cfg.pretrain_seed,
        )?;
    }
    let mapper = Mapper::new(cfg.mapper.clone(), &mut rng);
    Ok((mapper, lm))
}

/// Pretrain, then train the mapper (and the LM unless frozen) on the pairs.
pub fn train_on_pairs(
    cfg: &RunConfig,
    pairs: &[(Vec<f64>, String)],
) -> Result<TrainedRun, PipelineError> {
    let vocab = grammar_vocabulary();
    let (mapper, lm) = init_models(cfg, &vocab)?;
    let mut bundle = ModelBundle::new(cfg.encoder.clone(), mapper, lm, cfg.train.freeze_lm);
    let records = TrainRecord::from_pairs(pairs, &vocab, cfg.train.max_len)?;
    let log = train(&mut bundle, &records, &cfg.train)?;
    Ok(TrainedRun { bundle, vocab, log })
}

/// Full training run with the dataset read from `train_data`.
pub fn run_training(cfg: &RunConfig) -> Result<TrainedRun, PipelineError> {
    let pairs = load_embeddings(cfg.require_train_data()?)?;
    train_on_pairs(cfg, &pairs)
}

/// Generate a caption for every record, parallel over records.
pub fn caption_pairs(
    bundle: &ModelBundle<f32>,
    vocab: &Vocabulary,
    pairs: &[(Vec<f64>, String)],
    decode: &DecodeConfig,
) -> Result<Vec<Generation>, PipelineError> {
    par_map(pairs, |(emb, _)| generate(bundle, emb, decode, vocab))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(Into::into)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Fraction of generated captions equal to their reference.
    pub exact_match: f64,
}

/// Score generated captions against the dataset captions as references; the
/// CIDEr idf corpus is the reference set itself.
pub fn evaluate(
    bundle: &ModelBundle<f32>,
    vocab: &Vocabulary,
    pairs: &[(Vec<f64>, String)],
    decode: &DecodeConfig,
) -> Result<EvalScores, PipelineError> {
    let generations = caption_pairs(bundle, vocab, pairs, decode)?;
    let candidates: Vec<String> = generations.into_iter().map(|g| g.caption).collect();
    let references: Vec<Vec<String>> = pairs.iter().map(|(_, c)| vec![c.clone()]).collect();
    let exact = candidates
        .iter()
        .zip(pairs)
        .filter(|(c, (_, r))| *c == r)
        .count();
    Ok(EvalScores {
        bleu4: bleu4(&candidates, &references)?,
        rouge_l: rouge_l_corpus(&candidates, &references)?,
        cider: cider(&candidates, &references, &references)?,
        exact_match: exact as f64 / pairs.len().max(1) as f64,
    })
}

/// One ablation measurement: prefix length, split name, and scores.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub k: usize,
    pub split: &'static str,
    pub bleu4: f64,
    pub cider: f64,
}

/// Train one frozen-LM mapper per prefix length and score both splits.
/// The LM is pretrained once and shared; each K job is independent (mapper
/// init reseeded from the model seed) so the rows do not depend on execution
/// order and the Ks may run in parallel.
pub fn run_ablation(cfg: &RunConfig, ks: &[usize]) -> Result<Vec<AblationRow>, PipelineError> {
    let vocab = grammar_vocabulary();
    let train_pairs = load_embeddings(cfg.require_train_data()?)?;
    let test_pairs = load_embeddings(
        cfg.test_data
            .as_deref()
            .ok_or(ConfigError::MissingKey("test_data"))?,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed);
    let mut lm: Lm<f32> = Lm::new(cfg.lm_config(vocab.size()), &mut rng);
    if cfg.pretrain_steps > 0 {
        pretrain_lm(
            &mut lm,
            &vocab,
            &GrammarConfig::default().all_captions(),
            cfg.pretrain_steps,
            cfg.train.max_len,
            cfg.pretrain_batch_size,
            cfg.pretrain_lr,
            cfg.pretrain_seed,
        )?;
    }

    let per_k = par_map(ks, |&k| -> Result<Vec<AblationRow>, PipelineError> {
        let mut mapper_cfg = cfg.mapper.clone();
        mapper_cfg.k = k;
        let mut mapper_rng = ChaCha8Rng::seed_from_u64(cfg.model_seed);
        let mapper = Mapper::new(mapper_cfg, &mut mapper_rng);
        let mut bundle = ModelBundle::new(cfg.encoder.clone(), mapper, lm.clone(), true);
        let mut tcfg = cfg.train.clone();
        tcfg.freeze_lm = true;
        let records = TrainRecord::from_pairs(&train_pairs, &vocab, tcfg.max_len)?;
        train(&mut bundle, &records, &tcfg)?;

        let mut rows = Vec::new();
        for (split, pairs) in [("train", &train_pairs), ("test", &test_pairs)] {
            let scores = evaluate(&bundle, &vocab, pairs, &cfg.decode)?;
            rows.push(AblationRow {
                k,
                split,
                bleu4: scores.bleu4,
                cider: scores.cider,
            });
        }
        Ok(rows)
    });
    let mut out = Vec::new();
    for rows in per_k {
        out.extend(rows?);
    }
    Ok(out)
}

/// Write the dataset files named by the config using the default grammar.
pub fn generate_dataset_files(
    cfg: &RunConfig,
    seed: u64,
    n_train: usize,
    n_test: usize,
) -> Result<(), PipelineError> {
    let train_path = cfg.require_train_data()?.to_path_buf();
    let test_path: &Path = cfg
        .test_data
        .as_deref()
        .ok_or(ConfigError::MissingKey("test_data"))?;
    crate::data_synth::generate_dataset(
        seed,
        n_train,
        n_test,
        &GrammarConfig::default(),
        &cfg.encoder,
        &train_path,
        test_path,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.encoder.d_clip = 16;
        cfg.encoder.seed = 17;
        cfg.mapper.k = 2;
        cfg.mapper.d_clip = 16;
        cfg.mapper.d_lm = 16;
        cfg.mapper.layers = 1;
        cfg.mapper.heads = 2;
        cfg.lm_layers = 1;
        cfg.lm_heads = 2;
        cfg.max_positions = 2 + 12;
        cfg.pretrain_steps = 10;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 4;
        cfg.train.warmup_steps = 2;
        cfg.train_data = Some(dir.join("train.tsv"));
        cfg.test_data = Some(dir.join("test.tsv"));
        cfg
    }

    #[test]
    fn training_run_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        crate::data_synth::generate_dataset(
            7,
            8,
            4,
            &GrammarConfig::default(),
            &cfg.encoder,
            cfg.train_data.as_deref().unwrap(),
            cfg.test_data.as_deref().unwrap(),
        )
        .unwrap();
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(
            crate::train::param_bytes(&a.bundle),
            crate::train::param_bytes(&b.bundle)
        );
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn evaluate_scores_exact_copies_at_the_maxima() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        crate::data_synth::generate_dataset(
            7,
            8,
            4,
            &GrammarConfig::default(),
            &cfg.encoder,
            cfg.train_data.as_deref().unwrap(),
            cfg.test_data.as_deref().unwrap(),
        )
        .unwrap();
        let pairs = load_embeddings(cfg.train_data.as_deref().unwrap()).unwrap();
        let candidates: Vec<String> = pairs.iter().map(|(_, c)| c.clone()).collect();
        let references: Vec<Vec<String>> = pairs.iter().map(|(_, c)| vec![c.clone()]).collect();
        assert!((bleu4(&candidates, &references).unwrap() - 100.0).abs() < 1e-9);
        assert!((rouge_l_corpus(&candidates, &references).unwrap() - 1.0).abs() < 1e-9);
        assert!((cider(&candidates, &references, &references).unwrap() - 10.0).abs() < 1e-9);
    }
}
