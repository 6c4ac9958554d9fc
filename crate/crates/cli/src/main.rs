//! `mowe`: vocabulary building, bucket planning, training, evaluation,
//! ablations and dispatch statistics for word-expert models.
//!
//! Exit status is 0 on success, 1 on a usage error (bad flags, missing
//! files, config schema violations) and 2 on a runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(mowe::Error),
}

impl From<mowe::Error> for CliError {
    /// Malformed input files are schema violations, not runtime failures.
    fn from(e: mowe::Error) -> Self {
        match e {
            mowe::Error::Parse { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mowe", version, about = "Word-expert language model toolkit")]
pub struct Cli {
    /// Run configuration file (TOML); flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a subword vocabulary from a corpus.
    BuildDefaultVocab(BuildDefaultVocab),
    /// Build the routing vocabulary, hash table and frequency table.
    BuildRoutingVocab(BuildRoutingVocab),
    /// Split routing ids into buckets and lay out experts.
    PlanBuckets(PlanBuckets),
    /// Pretrain with span corruption and write a checkpoint.
    Pretrain(Pretrain),
    /// Finetune a checkpoint on question-answer pairs.
    Finetune(Finetune),
    /// Exact-match recall of a checkpoint on question-answer pairs.
    Eval(Eval),
    /// Sweep one experiment axis over values and seeds on the fact corpus.
    Ablate(Ablate),
    /// Per-batch dispatch statistics as CSV.
    Stats(Stats),
    /// Recall with and without knowledge-range experts.
    ProbeDeactivation(Probe),
}

#[derive(Debug, Args)]
pub struct BuildDefaultVocab {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Total vocabulary size including reserved ids.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub sentinels: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildRoutingVocab {
    #[arg(long)]
    pub names: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub default_vocab: Option<PathBuf>,
    /// Output directory for routing_vocab.tsv, hash_table.tsv and frequencies.tsv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanBuckets {
    #[arg(long)]
    pub freq: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub bypass: Option<usize>,
    /// Shape spec (TOML); defaults to the four-bucket desk layout.
    #[arg(long)]
    pub shapes: Option<PathBuf>,
    /// `mass` or `count`.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Vocabulary files shared by every command that tokenizes text.
#[derive(Debug, Args)]
pub struct VocabArgs {
    #[arg(long)]
    pub default_vocab: Option<PathBuf>,
    /// Directory written by build-routing-vocab.
    #[arg(long)]
    pub routing_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Pretrain {
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss trace CSV to write.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Finetune {
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Question-answer pairs, one `question<TAB>answer` per line.
    #[arg(long)]
    pub qa: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, overrides_with = "no_freeze")]
    pub freeze: bool,
    #[arg(long)]
    pub no_freeze: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub qa: Option<PathBuf>,
    /// Per-question CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Ablate {
    /// routing_vocab_size, num_experts, mowe_layers, expert_dims or freeze.
    #[arg(long)]
    pub axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub finetune_steps: Option<usize>,
    /// Results CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Stats {
    /// Emit one CommReport row per batch.
    #[arg(long)]
    pub dispatch: bool,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Lines per batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// CSV to write; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Probe {
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub qa: Option<PathBuf>,
    /// Routing ids at or above this are deactivated; defaults to the
    /// default vocabulary size.
    #[arg(long)]
    pub threshold: Option<usize>,
    /// CSV of answers that changed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
