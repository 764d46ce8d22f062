//! `ingest`: runs a media ingest origin server from a YAML configuration.

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use ingest_core::config::{parse_config, validate_config};
use ingest_core::lifecycle::CancelToken;
use ingest_core::runtime::{run_system, EXIT_CONFIG, EXIT_RUNTIME};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "ingest", version, about = "Media ingest origin server")]
struct Args {
    /// Path to the YAML configuration file.
    #[arg(long, short)]
    config: PathBuf,

    /// Log level or filter directive, e.g. `info` or `ingest_core=debug`.
    #[arg(long, default_value = "info")]
    log_level: String,
}

fn load(path: &PathBuf) -> anyhow::Result<ingest_core::config::Config> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let filter = EnvFilter::try_new(&args.log_level).unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    let cfg = match load(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let violations = validate_config(&cfg);
    if !violations.is_empty() {
        for v in &violations {
            eprintln!("{v}");
        }
        return ExitCode::from(EXIT_CONFIG as u8);
    }

    let cancel = CancelToken::new();
    let on_signal = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        tracing::info!("signal received, shutting down");
        on_signal.cancel();
    }) {
        eprintln!("error: installing signal handler: {e}");
        return ExitCode::from(EXIT_RUNTIME as u8);
    }
    ExitCode::from(run_system(&cfg, &cancel) as u8)
}
