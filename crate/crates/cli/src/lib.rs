//! `grove` command-line front end.
//!
//! Every command prints a single JSON object on stdout and logs to stderr.
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use grove_core::dataio::Direction;
use grove_core::error::{ErrorClass, GroveError};
use grove_core::gplvm::Modality;
use grove_core::metrics::{Distance, DEFAULT_BINS};

pub mod commands;

#[derive(Debug, Parser)]
#[command(name = "grove", version, about = "Probabilistic embeddings for frozen vision-language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the manifest's train split.
    Train {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        texts: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `key = value` file; keys are the training configuration fields.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; the loss trace is written next to it as `<stem>.trace.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Map deterministic embeddings to probabilistic ones.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        modality: Modality,
        /// Means go here; variances to `<stem>.var.grve`, uncertainties to `<stem>.uncertainty.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recall@1 over the manifest's test split.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        direction: Direction,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "w2")]
        distance: Distance,
        /// JSON report with per-query ranks.
        #[arg(long)]
        out: PathBuf,
    },
    /// Binned uncertainty vs Recall@1 (W2 ranking) over the test split.
    Calibrate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        direction: Direction,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the most uncertain rows of a pool.
    Select {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        modality: Modality,
        #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
        k: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A front-end error that is the caller's fault (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Maps an error chain onto the exit-code taxonomy. Anything unclassified
/// (for example a failed write) counts as a data error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(g) = cause.downcast_ref::<GroveError>() {
            return match g.class() {
                ErrorClass::Usage => EXIT_USAGE,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
    }
    EXIT_DATA
}

fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn init_threads() -> anyhow::Result<()> {
    if let Some(raw) = std::env::var_os("GROVE_THREADS") {
        let n: usize = raw
            .to_str()
            .and_then(|s| s.trim().parse().ok())
            .filter(|&n| n > 0)
            .ok_or_else(|| UsageError(format!("GROVE_THREADS must be a positive integer, got {raw:?}")))?;
        if !grove_core::par::init_global_threads(n) {
            log::warn!("GROVE_THREADS={n} ignored: worker pool already initialised or parallelism disabled");
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    let result = init_threads().and_then(|()| commands::run(cli.command));
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            0
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            code
        }
    }
}
