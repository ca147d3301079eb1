use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wordgan_cli::commands;
use wordgan_cli::config::RunConfig;

/// Word-by-word text-to-image GAN: generate a dataset, train, render
/// per-word image strips, and evaluate similarity trends.
#[derive(Parser)]
#[command(name = "wordgan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Plain-text config file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config file and key overrides).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// KEY=VALUE overrides applied after the config file.
    #[arg(global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic captioned shapes dataset to dataset_dir.
    Dataset,
    /// Train on dataset_dir; writes checkpoints and a loss log.
    Train,
    /// Generate one image per word of `text=...` from a checkpoint.
    Generate,
    /// Score generated sequences against real images into report.csv.
    Eval,
    /// Print a checkpoint's manifest.
    Inspect,
}

fn main() -> ExitCode {
    // WORDGAN_THREADS caps the worker pool; 1 forces fully sequential
    // execution (results are identical at any thread count).
    if let Ok(v) = std::env::var("WORDGAN_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }

    let cli = Cli::parse();
    let cfg = match RunConfig::assemble(cli.config.as_deref(), &cli.overrides, cli.seed) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };

    let result = match cli.command {
        Command::Dataset => commands::cmd_dataset(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Generate => commands::cmd_generate(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Inspect => commands::cmd_inspect(&cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(wordgan_cli::exit_code(&e) as u8)
        }
    }
}
