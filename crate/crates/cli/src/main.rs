mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "cystscribe",
    version,
    about = "Extract, check and score pancreatic cyst findings in radiology reports"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct InOut {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a report corpus (JSONL) and write it back normalized.
    Ingest(InOut),
    /// Keep reports that mention one of the cohort keywords.
    Filter(InOut),
    /// Split a corpus by patient into train, val and test files.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        train: f64,
        #[arg(long, default_value_t = 0.03)]
        val: f64,
        #[arg(long, default_value_t = 0.07)]
        test: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Send every report to the configured endpoint and run all stages.
    Extract {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory holding one subdirectory per run.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        /// Overrides run.mode (standard or cot).
        #[arg(long)]
        mode: Option<String>,
        /// Overrides run.profile with a preset name.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Run the offline stages over stored completions as a new run.
    Replay {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        completions: PathBuf,
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Validate completions and vote across samples, writing record rows.
    Aggregate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        completions: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        tallies: Option<PathBuf>,
    },
    /// Re-derive computed fields and report disagreements.
    Audit {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Assign risk categories to record rows.
    Categorize {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Check that quoted observations appear in their reports.
    Ground {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        completions: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Score a run against annotations, or compare two runs.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Second run to compare against the first.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Written next to the run as eval_report.json when absent and the
        /// format is json.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the cost comparison from the [cost] section.
    Cost {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Serve a reader study.
    Serve {
        #[arg(long)]
        study: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Serve scripted completions on an OpenAI-compatible endpoint.
    Stub {
        #[arg(long, default_value_t = 8089)]
        port: u16,
        /// Defaults to the bundled fixture corpus.
        #[arg(long, requires = "completions")]
        corpus: Option<PathBuf>,
        #[arg(long, requires = "corpus")]
        completions: Option<PathBuf>,
    },
    /// Write the bundled synthetic corpus, annotations and completions.
    Fixtures {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Usage = 1,
    ValidationFailures = 2,
    EndpointFailure = 3,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { Status::Usage as u8 } else { Status::Ok as u8 });
        }
    };
    let filter = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter)),
        )
        .with_writer(std::io::stderr)
        .init();

    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(Status::Usage as u8);
        }
    };
    match runtime.block_on(commands::run(cli)) {
        Ok(status) => ExitCode::from(status as u8),
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.status as u8)
        }
    }
}
