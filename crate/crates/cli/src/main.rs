mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kesa_core::synth::SynthConfig;
use kesa_core::trainer::DEFAULT_GAMMAS;

use crate::error::CliError;

/// Knowledge-enhanced sentiment training.
///
/// Exit status: 0 on success, 2 for usage or configuration errors, 3 when
/// training diverges. `KESA_THREADS` caps the worker count.
#[derive(Parser)]
#[command(name = "kesa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a sentiment lexicon from SentiWordNet.
    Lexicon {
        #[command(subcommand)]
        action: LexiconAction,
    },
    /// Train every seed of a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train this single seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Write the auxiliary instances drawn for each sample as JSON lines.
        #[arg(long)]
        dump_instances: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on a labelled TSV file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON record (default: next to the checkpoint).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train once per loss weight and tabulate mean test accuracy.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GAMMAS)]
        gammas: Vec<f64>,
    },
    /// Generate a planted-lexicon synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        /// Validation size (default: same as --test).
        #[arg(long)]
        valid: Option<usize>,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Compiled lexicon to plant words from (default: a built-in list).
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        words_per_polarity: Option<usize>,
    },
}

#[derive(Subcommand)]
enum LexiconAction {
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Fail on the first malformed line instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("KESA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("KESA_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Lexicon {
            action: LexiconAction::Build { input, output, strict },
        } => commands::lexicon_build(&input, &output, strict),
        Command::Train {
            config,
            seed_override,
            dump_instances,
        } => commands::train(&config, seed_override, dump_instances.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            output,
        } => commands::eval(&checkpoint, &data, output.as_deref()),
        Command::Sweep { config, gammas } => commands::sweep(&config, &gammas),
        Command::Synth {
            out,
            train,
            valid,
            test,
            noise,
            seed,
            lexicon,
            words_per_polarity,
        } => commands::synth(commands::SynthArgs {
            out: &out,
            lexicon: lexicon.as_deref(),
            config: SynthConfig {
                train,
                valid: valid.unwrap_or(test),
                test,
                noise,
                seed,
                words_per_polarity,
                ..SynthConfig::default()
            },
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
