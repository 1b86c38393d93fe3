//! `protosplit`: generate synthetic bundles, detect inconsistent
//! prototypes, split them, score the result and serve the labeling API.

mod commands;
mod config;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "protosplit", version, about)]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// TOML file overriding split, fine-tune and detection defaults.
    #[arg(long, global = true, env = "PROTOSPLIT_CONFIG")]
    config: Option<PathBuf>,

    /// Run on a single thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic bundle with planted entangled prototypes.
    Generate(GenerateArgs),
    /// Rank prototypes by inconsistency and write a detection report.
    Detect(DetectArgs),
    /// Split prototypes and write the grown bundle and a split report.
    Split(SplitArgs),
    /// Score a bundle's channels against its part annotations.
    Metrics(MetricsArgs),
    /// Serve the HTTP API over a bundle.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    prototypes: Option<usize>,
    #[arg(long)]
    entangled: Option<usize>,
    #[arg(long)]
    patches_per_cluster: Option<usize>,
    /// Skip rendering placeholder thumbnails.
    #[arg(long)]
    no_thumbnails: bool,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long, env = "PROTOSPLIT_BUNDLE")]
    bundle: PathBuf,
    /// Detection report to write.
    #[arg(long)]
    out: PathBuf,
    /// Minimum clique size Q.
    #[arg(long)]
    min_clique: Option<usize>,
    #[arg(long)]
    delta_min: Option<f64>,
    #[arg(long)]
    delta_max: Option<f64>,
    #[arg(long)]
    delta_step: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["auto", "labels"])))]
struct SplitArgs {
    #[arg(long, env = "PROTOSPLIT_BUNDLE")]
    bundle: PathBuf,
    /// Use the detector's cliques as concepts (needs --report).
    #[arg(long, requires = "report")]
    auto: bool,
    /// JSON list of `{prototype, labels}` submissions.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Detection report of the input bundle.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Number of top-ranked prototypes to split in auto mode.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Output bundle directory; defaults to replacing the input bundle.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Split report to write.
    #[arg(long)]
    split_report: PathBuf,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long, env = "PROTOSPLIT_BUNDLE")]
    bundle: PathBuf,
    /// Bundle to compare against, usually the one before splitting.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Patches per channel.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "PROTOSPLIT_BUNDLE")]
    bundle: PathBuf,
    /// Detection report to load instead of detecting on demand.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, env = "PROTOSPLIT_ADDR", default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Session log (JSON lines); replayed on start.
    #[arg(long, env = "PROTOSPLIT_LOG", default_value = "session-log.jsonl")]
    log: PathBuf,
    /// Maximum concurrently running jobs.
    #[arg(long, env = "PROTOSPLIT_WORKERS")]
    workers: Option<usize>,
    /// Minimum concept and clique size Q.
    #[arg(long)]
    min_concept: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
