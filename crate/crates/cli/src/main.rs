//! `ccdf`: ingest a behavior log, train the category scorer, evaluate it,
//! build the item index and produce diversity-controlled recommendations.

mod commands;
mod config;
mod error;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Config, KEYS};
use error::CliError;
use workdir::{Lock, Staged};

#[derive(Debug, Parser)]
#[command(name = "ccdf", version, about = "Controllable category diversity pipeline")]
struct Cli {
    /// Config file of dotted keys (see `ccdf keys`).
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the log, split by day, build the graph and draw training samples.
    Ingest,
    /// Train the scorer; writes the checkpoint and per-epoch metrics.
    Train,
    /// Hit ratios of the model and the Statistics baseline on the test day.
    Eval,
    /// Build the per-category top-N item index.
    BuildIndex,
    /// Recommend M items per user for every K in pipeline.ks.
    Recommend,
    /// Category diversity of the recommendations across pipeline.ks.
    Report,
    /// Run every stage in order.
    Pipeline,
    /// Write a synthetic interaction log.
    Synth {
        /// `shop` (grouped interests) or `cyclic` (fixed category cycle).
        #[arg(long, default_value = "shop")]
        kind: String,
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = 2017)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// List every config key with its default.
    Keys,
}

type Stage = fn(&Config, &mut Staged) -> Result<(), CliError>;

fn stages(command: &Command) -> Vec<Stage> {
    match command {
        Command::Ingest => vec![commands::ingest],
        Command::Train => vec![commands::train_model],
        Command::Eval => vec![commands::eval],
        Command::BuildIndex => vec![commands::build],
        Command::Recommend => vec![commands::recommend],
        Command::Report => vec![commands::report],
        Command::Pipeline => vec![
            commands::ingest,
            commands::train_model,
            commands::eval,
            commands::build,
            commands::recommend,
            commands::report,
        ],
        Command::Synth { .. } | Command::Keys => Vec::new(),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Keys => {
            for (key, default, doc) in KEYS {
                println!("{key:<24} {default:<16} {doc}");
            }
            return Ok(());
        }
        Command::Synth { kind, users, seed, out } => {
            let path = commands::synth(out, kind, *users, *seed)?;
            log::info!("wrote {}", path.display());
            return Ok(());
        }
        _ => {}
    }
    let cfg = Config::load(cli.config.as_deref(), &cli.overrides)?;
    let _lock = Lock::acquire(&cfg.work_dir)?;
    for stage in stages(&cli.command) {
        let mut staged = Staged::default();
        stage(&cfg, &mut staged)?;
        for path in staged.commit()? {
            log::debug!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
