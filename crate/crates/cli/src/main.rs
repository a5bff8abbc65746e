//! `mapd`: dataset generation, slot optimisation, predictor training,
//! evaluation and reporting for movable-antenna secure links.

mod commands;
mod config_file;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mapd::models::ModelKind;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mapd", version, about = "Movable-antenna position optimisation and forecasting")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration (defaults to the built-in scenario)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master RNG seed (integer); overrides `seed` and `model.seed` from the config
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory, created if missing
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (count, 0 = one per core); never changes results
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimise every slot of the configured trajectories and write DIR/dataset.mapd
    GenData,
    /// Run the swarm for one slot and write its iteration history CSV
    Optimize {
        /// Slot index (0-based)
        #[arg(long, value_name = "N")]
        slot: usize,
        /// Dataset supplying the previous slot's layout (required for slot > 0)
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Train a predictor; writes DIR/<kind>.model, DIR/<kind>_loss.csv and DIR/<kind>_timing.csv
    Train {
        /// Dataset file written by gen-data
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        /// Model kind: proposed, lstm_only, transformer_only or narx (default from config)
        #[arg(long, value_name = "KIND", value_parser = parse_kind)]
        kind: Option<ModelKind>,
        /// Maximum training epochs (count; default from config)
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
    },
    /// Evaluate trained models and the persistence baseline; writes DIR/metrics.json
    Eval {
        /// Dataset file written by gen-data
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        /// Model files written by train (repeatable)
        #[arg(long = "model", value_name = "PATH")]
        models: Vec<PathBuf>,
        /// Skip the wall-clock inference timing (milliseconds per predict call)
        #[arg(long)]
        no_timing: bool,
    },
    /// Azimuth sweep of array gain (dB) for the fixed grid, the optimised layout and MRT
    GainPattern {
        /// Dataset file written by gen-data
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        /// Slot whose optimised layout and Bob position are used (0-based)
        #[arg(long, value_name = "N", default_value_t = 0)]
        slot: usize,
        /// Azimuth step, degrees
        #[arg(long, value_name = "DEG", default_value_t = 1.0)]
        step_deg: f64,
    },
    /// Render CSV tables, SVG charts and a manifest from DIR/metrics.json
    Report {
        /// Metrics file written by eval
        #[arg(long, value_name = "PATH")]
        metrics: PathBuf,
    },
    /// Print the effective configuration as TOML
    ShowConfig,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| {
        let names: Vec<&str> = ModelKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown model kind `{s}` (expected one of {})", names.join(", "))
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build_global()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    let mut config = match &cli.global.config {
        Some(p) => config_file::load(p)?,
        None => mapd::config::RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
        config.model.seed = seed;
    }
    let out = &cli.global.out;
    match cli.command {
        Command::GenData => commands::gen_data(&config, out),
        Command::Optimize { slot, dataset } => commands::optimize(&config, slot, dataset.as_deref(), out),
        Command::Train { dataset, kind, epochs } => {
            if let Some(k) = kind {
                config.model.kind = k;
            }
            if let Some(e) = epochs {
                config.model.epochs = e;
            }
            commands::train(&config, &dataset, out)
        }
        Command::Eval { dataset, models, no_timing } => commands::eval(&config, &dataset, &models, !no_timing, out),
        Command::GainPattern { dataset, slot, step_deg } => commands::gain_pattern(&config, &dataset, slot, step_deg, out),
        Command::Report { metrics } => commands::report(&metrics, out),
        Command::ShowConfig => {
            print!("{}", toml::to_string_pretty(&config).map_err(|e| CliError::config(e.to_string()))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.category.exit_code() as u8)
        }
    }
}
