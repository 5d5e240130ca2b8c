//! `omniguide` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failures, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Handshake(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Handshake(_) => 4,
            CliError::Runtime(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Handshake(m) => write!(f, "handshake failed: {m}"),
            CliError::Runtime(m) => write!(f, "decode failed: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "omniguide", version, about = "Guidance decoding over omni, text-only and reasoning branches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command that runs a job. Flags beat environment
/// variables, which beat the config file.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Run configuration (.toml, .json, or a .jsonl trace to replay).
    #[arg(long)]
    pub config: PathBuf,
    /// Guidance strategy, optionally with a fixed weight: `name[:alpha]`.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, env = "OMNIGUIDE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub repetition_penalty: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<u32>,
    #[arg(long)]
    pub warmup_slope: Option<f64>,
    #[arg(long)]
    pub greedy: bool,
    /// Trace file (JSON lines).
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    #[arg(long, env = "OMNIGUIDE_BASE_ENDPOINT")]
    pub base_endpoint: Option<String>,
    #[arg(long, env = "OMNIGUIDE_GUIDE_ENDPOINT")]
    pub guide_endpoint: Option<String>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum RenderKind {
    Terminal,
    Html,
    Histogram,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum BenchFormat {
    Table,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run one decode job and write its text and trace.
    Decode {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the same job under several strategies.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated `name[:alpha]` list.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
    },
    /// Prefill and per-token latency relative to the `none` baseline.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, value_enum, default_value = "table")]
        format: BenchFormat,
    },
    /// Render a trace as shaded tokens or an alpha histogram.
    Render {
        trace: PathBuf,
        #[arg(long, value_enum, default_value = "terminal")]
        format: RenderKind,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a toy model over the wire protocol until SIGINT/SIGTERM.
    Serve {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7070")]
        addr: String,
        #[arg(long, default_value_t = 0.0)]
        per_token_prefill_ms: f64,
        #[arg(long, default_value_t = 0.0)]
        per_step_ms: f64,
        #[arg(long, default_value_t = 0.0)]
        omni_ms_per_kb: f64,
    },
    /// Print the effective configuration after defaults and overrides.
    ShowConfig {
        #[command(flatten)]
        run: RunArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Decode { run } => commands::decode(&run),
        Command::Compare { run, strategies } => commands::compare(&run, &strategies),
        Command::Bench { run, reps, format } => commands::bench(&run, reps, format),
        Command::Render { trace, format, bins, out } => commands::render(&trace, format, bins, out.as_deref()),
        Command::Serve {
            spec,
            addr,
            per_token_prefill_ms,
            per_step_ms,
            omni_ms_per_kb,
        } => commands::serve(&spec, &addr, [per_token_prefill_ms, per_step_ms, omni_ms_per_kb]),
        Command::ShowConfig { run } => commands::show_config(&run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("omniguide: {e}");
            ExitCode::from(e.code())
        }
    }
}
