//! Command-line surface: dataset generation, training, captioning,
//! prefix interpretation, evaluation, the prefix-length ablation, and the
//! finite-difference gradient check.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error,
//! 3 verification failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use prefixcap::checkpoint::{load_checkpoint, save_checkpoint};
use prefixcap::config::RunConfig;
use prefixcap::decode::DecodeConfig;
use prefixcap::encoder::load_embeddings;
use prefixcap::gradcheck::suites;
use prefixcap::interpret::interpret_prefix;
use prefixcap::mapper::map_to_prefix;
use prefixcap::pipeline::{caption_pairs, evaluate, run_ablation, run_training};
use prefixcap::text::Vocabulary;
use prefixcap::train::ModelBundle;

#[derive(Parser)]
#[command(
    name = "prefixcap",
    version,
    about = "Prefix-conditioned image captioning at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic train/test dataset files from the closed grammar
    GenData {
        /// Config file naming train_data/test_data output paths and encoder settings
        #[arg(long)]
        config: PathBuf,
        /// Scene sampling seed
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
    },
    /// Pretrain the LM, train the mapper, write checkpoint + log CSV
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print caption and log-probability for each dataset record
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Beam width (default greedy)
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Print the nearest-token reading of each prefix next to the caption
    Interpret {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score generated captions against the dataset captions (CSV)
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train one frozen-LM mapper per prefix length and emit the BLEU/CIDEr table (CSV)
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated prefix lengths
        #[arg(long, default_value = "1,2,5,10", value_delimiter = ',')]
        prefix_lengths: Vec<usize>,
    },
    /// Run all finite-difference gradient suites at f64
    Gradcheck,
}

/// Failure modes mapped to exit codes 2 (data/config) and 3 (verification).
enum CliError {
    Data(String),
    Verification(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Data(e.to_string())
    }
}

fn vocab_path(ckpt: &Path) -> PathBuf {
    PathBuf::from(format!("{}.vocab", ckpt.display()))
}

fn load_model(ckpt: &Path) -> Result<(ModelBundle<f32>, Vocabulary), CliError> {
    let (bundle, _seed) = load_checkpoint(ckpt)?;
    let vp = vocab_path(ckpt);
    let vocab = Vocabulary::load(&vp)
        .map_err(|e| CliError::Data(format!("cannot load vocabulary {}: {e}", vp.display())))?;
    if vocab.size() != bundle.lm.cfg.vocab_size {
        return Err(CliError::Data(format!(
            "vocabulary {} has {} entries but the checkpoint expects {}",
            vp.display(),
            vocab.size(),
            bundle.lm.cfg.vocab_size
        )));
    }
    Ok((bundle, vocab))
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData {
            config,
            seed,
            n_train,
            n_test,
        } => {
            let cfg = RunConfig::load(&config)?;
            prefixcap::pipeline::generate_dataset_files(&cfg, seed, n_train, n_test)?;
        }
        Cmd::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt = cfg.require_checkpoint()?.to_path_buf();
            let run = run_training(&cfg)?;
            save_checkpoint(&ckpt, &run.bundle, cfg.train.seed)?;
            run.vocab.save(&vocab_path(&ckpt))?;
            if let Some(log_path) = &cfg.log {
                let mut f = std::io::BufWriter::new(std::fs::File::create(log_path)?);
                writeln!(f, "step,lr,loss")?;
                for (step, lr, loss) in &run.log {
                    writeln!(f, "{step},{lr},{loss}")?;
                }
            }
        }
        Cmd::Caption { ckpt, input, beam } => {
            let (bundle, vocab) = load_model(&ckpt)?;
            let pairs = load_embeddings(&input)?;
            let decode = DecodeConfig {
                beam_width: beam.unwrap_or(1),
                ..DecodeConfig::default()
            };
            for g in caption_pairs(&bundle, &vocab, &pairs, &decode)? {
                println!("{}\t{:.6}", g.caption, g.logprob);
            }
        }
        Cmd::Interpret { ckpt, input } => {
            let (bundle, vocab) = load_model(&ckpt)?;
            let pairs = load_embeddings(&input)?;
            let decode = DecodeConfig::default();
            for (emb, _) in &pairs {
                let prefix = map_to_prefix(&bundle.mapper, emb)?;
                let slots = interpret_prefix(&bundle.lm, &prefix)?;
                let read: Vec<&str> = slots
                    .iter()
                    .map(|s| vocab.token_of(s.token_id).unwrap_or("<unk>"))
                    .collect();
                let g = prefixcap::decode::generate_from_prefix(&bundle, &prefix, &decode, &vocab)?;
                println!("prefix : {}", read.join(" "));
                println!("caption: {}", g.caption);
                println!();
            }
        }
        Cmd::Eval { ckpt, input } => {
            let (bundle, vocab) = load_model(&ckpt)?;
            let pairs = load_embeddings(&input)?;
            let scores = evaluate(&bundle, &vocab, &pairs, &DecodeConfig::default())?;
            println!("metric,value");
            println!("BLEU@4,{:.6}", scores.bleu4);
            println!("ROUGE-L,{:.6}", scores.rouge_l);
            println!("CIDEr,{:.6}", scores.cider);
        }
        Cmd::Ablate {
            config,
            prefix_lengths,
        } => {
            let cfg = RunConfig::load(&config)?;
            let rows = run_ablation(&cfg, &prefix_lengths)?;
            println!("K,split,BLEU@4,CIDEr");
            for r in rows {
                println!("{},{},{:.6},{:.6}", r.k, r.split, r.bleu4, r.cider);
            }
        }
        Cmd::Gradcheck => {
            let mut failed = false;
            for suite in suites::run_all() {
                let ok = suite.passes();
                failed |= !ok;
                println!(
                    "{}: {} (max rel err {:.3e}, tol {:.0e}, {} params; worst {})",
                    suite.name,
                    if ok { "pass" } else { "FAIL" },
                    suite.report.max_rel_err,
                    suite.tol,
                    suite.report.checked,
                    suite.report.worst,
                );
            }
            if failed {
                return Err(CliError::Verification("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not usage errors.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
