//! `wormbox` operator command line.
//!
//! Verbs cover the three lifecycle stages (init, serve, audit) plus the
//! honeypot diff, trace record/replay, and the append benchmark. Every
//! command prints line-delimited `key=value` records so scripts can parse
//! the output without scraping prose.
//!
//! Exit codes: 0 success or pass, 1 verification or policy failure,
//! 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wormbox_core::config::{self, Config};

mod audit;
mod bench;
mod diff;
mod init;
mod serve;
mod tracecmd;
mod wire;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration. Exit 2.
    Usage(String),
    /// The command ran but verification or policy checks failed. Exit 1.
    Failure(String),
}

pub type CliResult = Result<(), CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn failure(msg: impl Into<String>) -> CliError {
    CliError::Failure(msg.into())
}

/// Read and parse a flat key=value config file.
pub fn load_config(path: &Path) -> Result<Config, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    config::parse(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

/// Read a 32-byte raw key file.
pub fn read_key(path: &Path) -> Result<[u8; 32], CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| usage(format!("cannot read key {}: {e}", path.display())))?;
    let arr: [u8; 32] = bytes
        .as_slice()
        .try_into()
        .map_err(|_| usage(format!("key {} is {} bytes, expected 32", path.display(), bytes.len())))?;
    Ok(arr)
}

#[derive(Parser)]
#[command(name = "wormbox", version, about = "Append-only storage enforcement over NBD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Format the image if absent, create the configured empty logs, and
    /// initialize the seal store.
    Init {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export the image over NBD with the inference engine attached. Runs
    /// until SIGINT or SIGTERM.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Verify a seal store against its initial auditor key.
    Audit {
        #[arg(long)]
        store: PathBuf,
        /// Defaults to <store>/auditor.key.
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Compare the img logs inside a (possibly tampered) image against the
    /// sealed real logs.
    Diff {
        #[arg(long)]
        config: PathBuf,
        /// Image to inspect instead of the configured one.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Record or replay raw device write traces.
    #[command(subcommand)]
    Trace(TraceCmd),
    /// Concurrent append workload against an in-process export.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Concurrent writer count.
        #[arg(long, default_value_t = 16)]
        processes: u32,
        /// Workload duration in seconds.
        #[arg(long = "duration-s")]
        duration_s: u64,
        /// Payload bytes per appended record.
        #[arg(long = "record-bytes", default_value_t = 16384)]
        record_bytes: u32,
        /// Keep the scratch directory instead of deleting it.
        #[arg(long)]
        keep: bool,
    },
}

#[derive(Subcommand)]
enum TraceCmd {
    /// Serve one client session and write every received WriteOp, with
    /// arrival timing, to a trace file. The engine is not attached.
    Record {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feed a recorded trace to the engine against the configured image
    /// and store.
    Replay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Acceleration factor. Arrival deltas and the lambda/omega windows
        /// are divided by it, so the inferred appends are unchanged.
        #[arg(long, default_value_t = 1)]
        speed: u32,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_micros()
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init { config } => init::run(&config),
        Command::Serve { config } => serve::run(&config),
        Command::Audit { store, key } => audit::run(&store, key.as_deref()),
        Command::Diff { config, image } => diff::run(&config, image.as_deref()),
        Command::Trace(TraceCmd::Record { config, out }) => tracecmd::record(&config, &out),
        Command::Trace(TraceCmd::Replay { config, trace, speed }) => {
            tracecmd::replay(&config, &trace, speed)
        }
        Command::Bench { config, processes, duration_s, record_bytes, keep } => {
            bench::run(&config, processes, duration_s, record_bytes, keep)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
