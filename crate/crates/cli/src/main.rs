//! `prunekit`: train, score, search, prune, distill and evaluate small
//! decoder-only transformers from the command line.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "prunekit", version, about = "Structured pruning and distillation pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Pipeline config in TOML; the toy recipe when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `train.steps=100`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Replaces the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output path of the command's artifact.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Line-delimited JSON metrics destination.
    #[arg(long, global = true)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the effective config as TOML.
    Config,
    /// Generate the synthetic bigram corpus.
    Synth,
    /// Byte-tokenize a text file into a token dataset.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a model from scratch on next-token loss.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Score heads, neurons, embedding channels and layers.
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Enumerate architectures under the parameter budget and rank them.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Trim a checkpoint to a target architecture.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Candidate manifest; the first (best-ranked) entry is the target.
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Pick this candidate id instead of the first.
        #[arg(long, requires = "candidates")]
        id: Option<usize>,
    },
    /// Retrain a student against a teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// LM loss and perplexity on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(command: Command, common: &Common) -> Result<serde_json::Value, CliError> {
    let cfg = commands::load_config(common)?;
    match command {
        Command::Config => commands::config(&cfg, common),
        Command::Synth => commands::synth(&cfg, common),
        Command::Ingest { input } => commands::ingest(&cfg, common, &input),
        Command::Train { data } => commands::train(&cfg, common, &data),
        Command::Importance { model, data } => commands::importance(&cfg, common, &model, &data),
        Command::Search { model, report, data } => commands::search(&cfg, common, &model, &report, &data),
        Command::Prune {
            model,
            report,
            candidates,
            id,
        } => commands::prune(&cfg, common, &model, &report, candidates.as_deref(), id),
        Command::Distill { teacher, student, data } => commands::distill(&cfg, common, &teacher, &student, &data),
        Command::Eval { model, data } => commands::eval(&cfg, common, &model, &data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command, &cli.common) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
