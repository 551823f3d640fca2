use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kgned::candidates::MatchMode;
use kgned::experiment::Protocol;
use kgned::kg::HopSet;
use kgned::Error;

mod commands;
mod config;

/// Named entity disambiguation with verbalized knowledge-graph context.
///
/// Every option below can also be set through a `KGNED_<NAME>` environment
/// variable (for example `KGNED_SEED`) or a config file key with the same
/// name in snake case. Flags win over the environment, which wins over the
/// config file.
#[derive(Debug, Parser)]
#[command(name = "kgned", version)]
pub struct Cli {
    /// Config file with `key=value` lines or a flat JSON object.
    #[arg(long, global = true, env = "KGNED_CONFIG")]
    pub config: Option<PathBuf>,

    /// Repeat for more logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fetch triples and labels for a list of entities into a KG directory.
    Fetch(FetchArgs),
    /// Train a classifier and write a checkpoint plus its loss history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare two prediction files against gold labels.
    Diff(DiffArgs),
    /// Rank the candidates of one mention.
    Disambiguate(DisambiguateArgs),
    /// Write the synthetic ambiguous-label corpus (KG, splits, vocabulary).
    Synth(SynthArgs),
    /// Convert a foreign JSONL dataset into the canonical format.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// SPARQL endpoint URL.
    #[arg(long, env = "KGNED_ENDPOINT")]
    pub endpoint: Option<String>,
    /// File with one entity id per line.
    #[arg(long)]
    pub entities: PathBuf,
    /// Hop levels: 1 or 12.
    #[arg(long, env = "KGNED_HOPS")]
    pub hops: Option<HopSet>,
    /// Maximum triples per entity and hop level.
    #[arg(long, env = "KGNED_CAP")]
    pub cap: Option<usize>,
    /// Concurrent requests.
    #[arg(long, env = "KGNED_PARALLELISM")]
    pub parallelism: Option<usize>,
    /// Label language.
    #[arg(long, env = "KGNED_LANG")]
    pub lang: Option<String>,
    /// KG directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ContextArgs {
    /// Hop levels used for context: 1 or 12.
    #[arg(long, env = "KGNED_CTX_HOPS")]
    pub ctx_hops: Option<HopSet>,
    /// Maximum context triples; 0 disables KG context.
    #[arg(long, env = "KGNED_MAX_TRIPLES")]
    pub max_triples: Option<usize>,
    /// Maximum input length in tokens.
    #[arg(long, env = "KGNED_MAX_SEQ_LEN")]
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training data (canonical JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// KG directory; required unless --max-triples is 0.
    #[arg(long)]
    pub kg: Option<PathBuf>,
    /// Vocabulary file. Built from the data and KG and written here if it
    /// does not exist yet.
    #[arg(long)]
    pub vocab: PathBuf,
    #[command(flatten)]
    pub context: ContextArgs,
    /// JSON file overriding model fields (d_model, n_layers, n_heads,
    /// ffn_dim, dropout).
    #[arg(long)]
    pub model_cfg: Option<PathBuf>,
    #[arg(long, env = "KGNED_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "KGNED_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, env = "KGNED_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "KGNED_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    /// Fraction of update steps used for learning-rate warmup.
    #[arg(long, env = "KGNED_WARMUP")]
    pub warmup: Option<f64>,
    /// Checkpoint path; the loss history goes to `<out>.history.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// KG directory; required when the checkpoint uses KG context.
    #[arg(long)]
    pub kg: Option<PathBuf>,
    /// pairs (precision/recall/F1) or argmax (in-KB accuracy).
    #[arg(long, env = "KGNED_PROTOCOL")]
    pub protocol: Option<Protocol>,
    /// Report JSON output.
    #[arg(long)]
    pub report: PathBuf,
    /// Also write argmax predictions as JSONL.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    /// Predictions of the baseline system.
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
    /// Dataset holding the gold entities.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct DisambiguateArgs {
    #[arg(long)]
    pub sentence: String,
    #[arg(long)]
    pub surface: String,
    #[arg(long)]
    pub kg: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Candidate lookup: exact or contains.
    #[arg(long = "match", env = "KGNED_MATCH")]
    pub match_mode: Option<MatchMode>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub labels: usize,
    #[arg(long, default_value_t = 600)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    /// 2-hop distractor triples per entity.
    #[arg(long, default_value_t = 3)]
    pub distractors: usize,
    #[arg(long, env = "KGNED_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Source JSONL, one mention per line.
    #[arg(long)]
    pub input: PathBuf,
    /// JSON field mapping; see `configs/` for examples.
    #[arg(long)]
    pub mapping: PathBuf,
    /// Title to entity id TSV, needed when the mapping sets `titles`.
    #[arg(long)]
    pub alignment: Option<PathBuf>,
    /// Canonical JSONL output.
    #[arg(long)]
    pub out: PathBuf,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Training { .. } | Error::Fetch(_) | Error::Endpoint { .. } | Error::Protocol(_) => EXIT_RUNTIME,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
