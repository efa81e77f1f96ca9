use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Single-for-multiple radiology report generation.
#[derive(Parser, Debug)]
#[command(name = "s4m", version, about)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-region dataset (manifest plus PNG views).
    Synth(SynthArgs),
    /// Train a model and keep the best checkpoint by validation BLEU-4.
    Train(TrainArgs),
    /// Generate reports for every example of a manifest.
    Generate(GenerateArgs),
    /// Score generated reports against a reference manifest.
    Evaluate(EvaluateArgs),
    /// Linear-probe a checkpoint's frozen image encoder on finding labels.
    Probe(ProbeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Synthesis spec (TOML or JSON); defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Dotted `key=value` changes to the spec.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training config (TOML or JSON) using the training field names.
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted `key=value` changes to the config, e.g. `model.d=64`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Manifest file or a directory holding `manifest.jsonl`
    /// (default: `$S4M_DATA_DIR`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Parent directory for the per-run output directory.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Knowledge base JSON replacing the bundled topic lists.
    #[arg(long)]
    pub knowledge: Option<PathBuf>,
    /// Topic embedding table (JSON) replacing the hashed embedder.
    #[arg(long)]
    pub topic_embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Region tag for every example, replacing the manifest's tags.
    #[arg(long)]
    pub tag: Option<String>,
    /// Only rows of this split (train, val or test).
    #[arg(long)]
    pub split: Option<String>,
    /// Beam width; 1 is greedy decoding.
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.6)]
    pub length_penalty: f64,
    /// Maximum length including BOS and EOS (default: the model's limit).
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Condition untagged examples on the whole topic set instead of failing.
    #[arg(long)]
    pub fallback_full_set: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Generated reports (JSONL from `generate`).
    #[arg(long)]
    pub hyps: PathBuf,
    /// Manifest holding the reference reports.
    #[arg(long)]
    pub refs: PathBuf,
    /// Directory receiving `eval.json` and `eval.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest with finding labels; trains on its train split and scores
    /// the test split (val when test is empty).
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a, cli.seed),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Probe(a) => commands::probe(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
