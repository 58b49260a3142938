//! `blendctl`: simulation, A/B comparison, counterfactual replay, plan
//! reports, anchor-metric analysis and the blend service.

mod commands;
mod inputs;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "blendctl", version, about = "Score blending toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the traffic simulator and write its artifacts.
    Simulate(SimulateArgs),
    /// Simulate two configs on identical traffic and compare them.
    Ab(AbArgs),
    /// Remove one plan from logged rankings and measure the effect.
    Replay(ReplayArgs),
    /// Per-plan attribution over a window of logged traffic.
    Report(ReportArgs),
    /// Rank candidate anchor metrics by calibration stability.
    Anchor(AnchorArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulation config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of simulated requests.
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AbArgs {
    #[arg(long)]
    config_a: PathBuf,
    #[arg(long)]
    config_b: PathBuf,
    /// Override the seed of both arms.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the request count of both arms.
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory; `ab.json` is written there.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LogArgs {
    /// Event log: a JSONL file, a simulation output directory or a service
    /// data directory.
    #[arg(long)]
    events: PathBuf,
    /// Decision log (JSONL). Rankings are rebuilt from the events when absent.
    #[arg(long)]
    decisions: Option<PathBuf>,
    /// Plan registry, simulation config or service registry file. Looked up
    /// next to the event log when absent.
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[command(flatten)]
    log: LogArgs,
    /// Plan to remove.
    #[arg(long)]
    plan: String,
    /// Output directory; `replay.json` is written there.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    log: LogArgs,
    /// `all`, a window id, or `start-end` in request timestamps.
    #[arg(long, default_value = "all")]
    window: String,
    /// Requests per window id. Defaults to the config's control tick.
    #[arg(long)]
    window_len: Option<u64>,
    /// Output directory; `report.json` and `report.csv` are written there.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AnchorArgs {
    /// Event log, as for `replay`.
    #[arg(long)]
    events: PathBuf,
    /// Metrics to compare (comma separated). Defaults to all six.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    /// Equal-frequency bins per curve.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Output directory for `anchor.json` and the per-metric curve CSVs.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "BLEND_PORT")]
    port: Option<u16>,
    /// Service config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Persist state here and recover it on restart.
    #[arg(long, env = "BLEND_DATA_DIR")]
    data_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a.config, a.seed, a.steps, &a.out),
        Command::Ab(a) => commands::ab(&a.config_a, &a.config_b, a.seed, a.steps, &a.out),
        Command::Replay(a) => commands::replay(&a.log.into(), &a.plan, &a.out),
        Command::Report(a) => commands::report(&a.log.into(), &a.window, a.window_len, &a.out),
        Command::Anchor(a) => commands::anchor(&a.events, &a.metrics, a.bins, &a.out),
        Command::Serve(a) => commands::serve(a.config.as_deref(), a.port, a.data_dir),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl From<LogArgs> for inputs::LogPaths {
    fn from(a: LogArgs) -> Self {
        Self {
            events: a.events,
            decisions: a.decisions,
            registry: a.registry,
        }
    }
}
