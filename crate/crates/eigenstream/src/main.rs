use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use eigenstream::data::load_splits;
use eigenstream::experiments;
use eigenstream::report::{write_manifest, Manifest};
use eigenstream::{CliError, Mode, RunConfig};

#[derive(Parser)]
#[command(name = "eigenstream", version, about = "Rank-1 streaming gradient experiments on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (flat key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `out_dir`, then `out/<subcommand>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train one network and record per-epoch metrics.
    Train,
    /// Batch-size sweep across strategies.
    Sweep,
    /// Gradient singular-value spectrum of a trained network.
    Spectrum,
    /// Streaming-estimate error against the exact batch decomposition.
    Converge,
    /// Pick a learning rate by short training runs.
    LrSearch,
}

impl Command {
    fn mode(self) -> Mode {
        match self {
            Command::Train => Mode::Train,
            Command::Sweep => Mode::Sweep,
            Command::Spectrum => Mode::Spectrum,
            Command::Converge => Mode::Converge,
            Command::LrSearch => Mode::LrSearch,
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let mode = cli.command.mode();
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Invalid("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path, mode)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(mode.name()));
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let splits = load_splits(&cfg)?;
    let result = experiments::run(mode, &cfg, &splits, cli.jobs.max(1), &out);
    let (artifacts, mut notes) = match &result {
        Ok(a) => (a.files.clone(), a.notes.clone()),
        Err(e) => (Vec::new(), vec![format!("failed: {e}")]),
    };
    notes.insert(0, format!("train samples {}, test samples {}", splits.train.len(), splits.test.len()));
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        subcommand: mode.name().to_string(),
        seed: cfg.seed,
        config: cfg.to_text(),
        started_unix: started,
        wall_time_secs: clock.elapsed().as_secs_f64(),
        artifacts,
        notes,
    };
    if out.is_dir() {
        write_manifest(&out, &manifest)?;
    }
    result.map(|_| ())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_divergence() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
