//! `ebfgate`: generate, segment, gate, evaluate and report on EBF streams.
//!
//! Exit codes: 0 success, 1 validation error (bad input data, config or
//! policy), 2 runtime error (I/O and everything else).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "ebfgate",
    version,
    about = "Dwell/conversion user segmentation and feature gating"
)]
struct Cli {
    /// Directory all relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a multi-user event stream with ground truth.
    Generate(GenerateArgs),
    /// Compute per-user statistics and per-epoch segment assignments.
    Segment(SegmentArgs),
    /// Apply a gating policy to an event stream.
    Gate(GateArgs),
    /// Compare two gating policies by normalized entropy.
    Evaluate(EvaluateArgs),
    /// Render evaluation reports as a table and write plot data.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 1000)]
    pub users: usize,
    /// Stream length in hours.
    #[arg(long, default_value_t = 24.0)]
    pub duration: f64,
    /// Overrides `seeds.simulator` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Regime mix / explicit profiles (TOML or JSON).
    #[arg(long)]
    pub regimes: Option<PathBuf>,
    #[arg(long, default_value = "events.jsonl")]
    pub out: PathBuf,
    /// Ground-truth sidecar (profiles and per-impression labels).
    #[arg(long, default_value = "truth.json")]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub delay_max_ms: i64,
    #[arg(long, default_value_t = 0.0)]
    pub outlier_rate: f64,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long, default_value = "events.jsonl")]
    pub events: PathBuf,
    #[arg(long, default_value = "stats.jsonl")]
    pub stats_out: PathBuf,
    #[arg(long, default_value = "segments.jsonl")]
    pub segments_out: PathBuf,
    #[arg(long, default_value = "calibration.json")]
    pub calibration_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GateArgs {
    #[arg(long, default_value = "events.jsonl")]
    pub events: PathBuf,
    #[arg(long, default_value = "segments.jsonl")]
    pub segments: PathBuf,
    /// Falls back to `policy` in the config.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long, default_value = "gated.jsonl")]
    pub out: PathBuf,
    #[arg(long, default_value = "ledger.json")]
    pub ledger: PathBuf,
    /// Use the assignment published before each event's epoch instead of the latest one.
    #[arg(long)]
    pub causal: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, default_value = "events.jsonl")]
    pub events: PathBuf,
    #[arg(long, default_value = "segments.jsonl")]
    pub segments: PathBuf,
    /// Baseline policy; identity when omitted.
    #[arg(long)]
    pub policy_a: Option<PathBuf>,
    /// Treatment policy; falls back to `policy` in the config.
    #[arg(long)]
    pub policy_b: Option<PathBuf>,
    /// Use simulator labels instead of recomputing window labels.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Cumulative NE curve (CSV) for both arms.
    #[arg(long)]
    pub curve_out: Option<PathBuf>,
    #[arg(long)]
    pub causal: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// NEReport JSON files, one table row each.
    #[arg(long = "report", required = true, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    #[arg(long, default_value = "table.txt")]
    pub out: PathBuf,
    /// Event stream for the log-dwell histogram.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long, default_value = "dwell_hist.csv")]
    pub hist_out: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub bin_width: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
