use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use equivae_cli::{
    cmd_embed, cmd_eval, cmd_generate, cmd_train, GenerateOptions, Probe, RunConfig, SplitName,
};

/// Invariant-equivariant VAE: train, evaluate, probe and export.
///
/// Log verbosity follows EQUIVAE_LOG (error, info or debug; default info).
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, replacing `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run seed, replacing `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distance-classify the test split and write report.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config; defaults to the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed of the cluster-mean draws.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode image grids from the latent space.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Repeatable; defaults to `evaluation.probes` of the config.
        #[arg(long, value_enum)]
        probe: Vec<Probe>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Class for interpolate and latent-grid.
        #[arg(long)]
        class: Option<usize>,
        /// Seed of the prior-sample draws.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export invariant embeddings and posterior means of a split as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: Option<PathBuf>) -> Result<Option<RunConfig>> {
    path.map(|p| RunConfig::load(&p)).transpose()
}

/// Writes one result line; a closed stdout (e.g. `| head`) is not an error.
fn emit(line: &dyn std::fmt::Display) -> Result<()> {
    match writeln!(std::io::stdout(), "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                config.set_seed(seed);
            }
            if let Some(out) = out {
                config.output_dir = out;
            }
            let outputs = cmd_train(&config)?;
            emit(&outputs.checkpoint.display())?;
        }
        Command::Eval {
            checkpoint,
            config,
            out,
            seed,
        } => {
            let report = cmd_eval(&checkpoint, load(config)?.as_ref(), out.as_deref(), seed)?;
            emit(&serde_json::to_string_pretty(&report)?)?;
        }
        Command::Generate {
            checkpoint,
            probe,
            config,
            out,
            class,
            seed,
        } => {
            let opts = GenerateOptions { class, seed };
            for path in cmd_generate(
                &checkpoint,
                load(config)?.as_ref(),
                &probe,
                out.as_deref(),
                &opts,
            )? {
                emit(&path.display())?;
            }
        }
        Command::Embed {
            checkpoint,
            split,
            config,
            out,
        } => {
            let path = cmd_embed(&checkpoint, load(config)?.as_ref(), split, out.as_deref())?;
            emit(&path.display())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EQUIVAE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
