//! Command-line driver for the attachment recommendation pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attachrec::pipeline::{run_stage, RunConfig, Stage};
use attachrec::Error;

#[derive(Parser)]
#[command(name = "attachrec", version, about = "Query formulation for email attachment recommendation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted retrieval signal.
    Synth {
        #[arg(long)]
        items: Option<usize>,
    },
    /// Parse and normalize a JSONL corpus.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Build one retrieval index per mailbox.
    Index,
    /// Mine request/reply instances.
    Mine,
    /// Synthesize silver queries.
    Silver {
        /// Candidate term budget.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the neural term rankers.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        context_width: Option<usize>,
        /// Also train the pointwise variant.
        #[arg(long)]
        pointwise: bool,
    },
    /// Write the formulated queries of every method for the test instances.
    Formulate {
        #[arg(long)]
        test_corpus: Option<PathBuf>,
    },
    /// Evaluate baselines, models and silver queries.
    Evaluate {
        #[arg(long)]
        test_corpus: Option<PathBuf>,
    },
    /// Retrain without each feature category and report MRR changes.
    Ablate,
    /// Run ingest through evaluate in order.
    Run {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        pointwise: bool,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig(format!("cannot read `{}`: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("`{}`: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = o.clone();
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(&cli.common)?;
    let stages = match cli.command {
        Command::Synth { items } => {
            if let Some(n) = items {
                cfg.synth.items = n;
            }
            vec![Stage::Synth]
        }
        Command::Ingest { corpus } => {
            cfg.paths.corpus = corpus.or(cfg.paths.corpus);
            vec![Stage::Ingest]
        }
        Command::Index => vec![Stage::Index],
        Command::Mine => vec![Stage::Mine],
        Command::Silver { k } => {
            if let Some(k) = k {
                cfg.silver.k = k;
            }
            vec![Stage::Silver]
        }
        Command::Train { epochs, context_width, pointwise } => {
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if let Some(l) = context_width {
                cfg.model.context_width = l;
            }
            cfg.model.pointwise |= pointwise;
            vec![Stage::Train]
        }
        Command::Formulate { test_corpus } => {
            cfg.paths.test_corpus = test_corpus.or(cfg.paths.test_corpus);
            vec![Stage::Formulate]
        }
        Command::Evaluate { test_corpus } => {
            cfg.paths.test_corpus = test_corpus.or(cfg.paths.test_corpus);
            vec![Stage::Evaluate]
        }
        Command::Ablate => vec![Stage::Ablate],
        Command::Run { corpus, pointwise } => {
            cfg.paths.corpus = corpus.or(cfg.paths.corpus);
            cfg.model.pointwise |= pointwise;
            vec![Stage::Ingest, Stage::Index, Stage::Mine, Stage::Silver, Stage::Train, Stage::Evaluate]
        }
        Command::Config => {
            cfg.validate()?;
            let text = toml::to_string_pretty(&cfg).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            print!("{text}");
            return Ok(());
        }
    };
    for stage in stages {
        let record = run_stage(stage, &cfg)?;
        let outputs: Vec<&String> = record.outputs.keys().collect();
        println!("{}: wrote {} artifact(s) to {}", stage.name(), outputs.len(), cfg.paths.out.display());
        if !record.notes.is_null() {
            println!("{}", serde_json::to_string(&record.notes).unwrap_or_default());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
