//! Command-line orchestration of the debunking pipeline: ingest knowledge,
//! train, evaluate, ablate, sweep, and answer debunk queries end to end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use veridex_core::error::Error;
use veridex_core::prompt::PromptMode;

use crate::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "veridex", version, about = "Rumor debunking pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk and embed debunking documents into a vector store
    Ingest {
        #[arg(long)]
        config: PathBuf,
        /// Documents JSONL; defaults to docs_path from the config
        #[arg(long)]
        docs: Option<PathBuf>,
        /// Output store file; defaults to store_path from the config
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Train a classifier on the configured dataset split
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        citizens: Option<usize>,
    },
    /// Evaluate the saved model on the held-out split
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Model file; defaults to model_path from the config
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train and evaluate the four ablation variants
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy grid over expert and citizen counts
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated expert counts, e.g. 2,6,10
        #[arg(long)]
        experts: String,
        /// Comma-separated citizen counts, e.g. 2,6,10
        #[arg(long)]
        citizens: String,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classify a claim, retrieve evidence, and generate a debunk
    Debunk {
        #[arg(long)]
        config: PathBuf,
        /// zero_shot, few_shot or cot; defaults to the config
        #[arg(long)]
        mode: Option<String>,
        /// Enable retrieval-augmented prompting
        #[arg(long, overrides_with = "no_rag")]
        rag: bool,
        /// Disable retrieval-augmented prompting
        #[arg(long)]
        no_rag: bool,
        #[arg(long)]
        top_n: Option<usize>,
        /// Stop before generation and print the rendered prompt
        #[arg(long)]
        dry_run: bool,
        /// The claim text to assess
        claim: String,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Backend(_) => 3,
        _ => 2,
    }
}

fn parse_counts(text: &str) -> Result<Vec<usize>, Error> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad count \"{p}\" in \"{text}\"")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Ingest {
            config,
            docs,
            store,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let docs = docs
                .or_else(|| cfg.docs_path.clone())
                .ok_or_else(|| Error::Config("no --docs flag and no docs_path in config".into()))?;
            let store = store.unwrap_or_else(|| cfg.store_path.clone());
            commands::cmd_ingest(&docs, &store, &cfg)
        }
        Command::Train {
            config,
            seed,
            experts,
            citizens,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            if let Some(experts) = experts {
                cfg.train.model.experts = experts;
            }
            if let Some(citizens) = citizens {
                cfg.train.model.citizens = citizens;
            }
            commands::cmd_train(&cfg)
        }
        Command::Eval { config, model } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(model) = model {
                cfg.model_path = model;
            }
            commands::cmd_eval(&cfg)
        }
        Command::Ablate { config, seed } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            commands::cmd_ablate(&cfg)
        }
        Command::Sweep {
            config,
            experts,
            citizens,
            threads,
            seed,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let expert_counts = parse_counts(&experts)?;
            let citizen_counts = parse_counts(&citizens)?;
            commands::cmd_sweep(&cfg, &expert_counts, &citizen_counts, threads.unwrap_or(1))
        }
        Command::Debunk {
            config,
            mode,
            rag,
            no_rag,
            top_n,
            dry_run,
            claim,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let mode = match mode {
                Some(m) => m.parse::<PromptMode>()?,
                None => cfg.prompt_mode,
            };
            let rag = if no_rag {
                false
            } else if rag {
                true
            } else {
                cfg.rag
            };
            let opts = commands::DebunkOptions {
                mode,
                rag,
                top_n: top_n.unwrap_or(cfg.retrieval_top_n),
                dry_run,
            };
            commands::cmd_debunk(&claim, &cfg, &opts)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not usage errors
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
