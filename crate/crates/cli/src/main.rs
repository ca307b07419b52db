use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcci_cli::exit;
use dcci_cli::replay::{replay, ReplayOptions};
use dcci_cli::report::{open_store, render_report, ReportFormat};
use dcci_core::gateway::{serve, ServiceConfig};

#[derive(Parser)]
#[command(name = "dcci", version, about = "Course assistant service and analytics tool")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Replay a JSON-lines query log against fixture pages and print the report.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        fixtures: PathBuf,
        /// Also persist the replayed records to this store log.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Mock clock start time (RFC 3339).
        #[arg(long)]
        start: Option<chrono::DateTime<chrono::Utc>>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Render the rating report of a store log.
    Report {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Export the store's users, sessions, turns and ratings as JSON lines.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fail(code: i32, message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(code as u8)
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(exit::CONFIG as u8);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();

    match cli.command {
        Command::Serve { config } => {
            let config = match ServiceConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(exit::CONFIG, e),
            };
            match serve(config).await {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) if e.is_config() => fail(exit::CONFIG, e),
                Err(e) => fail(exit::DATA, e),
            }
        }
        Command::Replay { log, fixtures, store, start, format } => {
            let text = match std::fs::read_to_string(&log) {
                Ok(t) => t,
                Err(e) => return fail(exit::DATA, format!("{}: {e}", log.display())),
            };
            let mut opts = ReplayOptions { format, ..ReplayOptions::default() };
            if let Some(s) = start {
                opts.start = s;
            }
            match replay(&text, &fixtures, store.as_deref(), &opts).await {
                Ok(report) => {
                    print!("{report}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(exit::DATA, e),
            }
        }
        Command::Report { store, format } => match render_report(&store, format) {
            Ok(out) => {
                print!("{out}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(exit::DATA, e),
        },
        Command::Export { store, out } => {
            let result = open_store(&store).and_then(|s| {
                s.snapshot()
                    .export_jsonl(&out)
                    .map_err(|e| dcci_cli::report::StoreError(e.to_string()))
            });
            match result {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(exit::DATA, e),
            }
        }
    }
}
