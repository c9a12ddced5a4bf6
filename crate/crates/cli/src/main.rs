//! `diffact`: generate data, train, decode, evaluate, ablate and verify.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffact_core::Error;

#[derive(Parser, Debug)]
#[command(name = "diffact", version, about = "Discrete-diffusion action chunk decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dataset file (default: `<out>/dataset.bin` or the config path).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Checkpoint file (default: `<out>/model.bin` or the config path).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Refinement rounds, overriding the config file.
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Number of evaluated episodes, overriding the config file.
    #[arg(long, global = true)]
    episodes: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic reaching dataset and fit the tokenizer.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of tasks, overriding the config file.
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Train the policy on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training steps, overriding the config file.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Decode one chunk for a task.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Task id in the dataset (default: the first held-out task).
        #[arg(long)]
        task: Option<u64>,
        /// Write the per-round trace to `<out>/trace.jsonl`.
        #[arg(long)]
        trace: bool,
    },
    /// Success rate on held-out tasks.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Strategy x temperature grid on held-out tasks.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in numerical and oracle checks.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(value) = std::env::var("DIFFACT_THREADS") {
        let n: usize = value
            .parse()
            .map_err(|_| Error::Config(format!("DIFFACT_THREADS={value} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData { common, tasks } => commands::gen_data(&common, tasks),
        Command::Train { common, steps } => commands::train(&common, steps),
        Command::Decode { common, task, trace } => commands::decode(&common, task, trace),
        Command::Eval { common } => commands::eval(&common),
        Command::Ablate { common } => commands::ablate(&common),
        Command::Verify { common } => commands::verify(&common),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}
