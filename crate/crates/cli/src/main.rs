//! `mate-optix`: spectra, couplings and fits for a membrane inside a
//! Fabry–Pérot cavity.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 bad input or model parameters,
//! 3 fit did not converge. Errors print one line, `error[<kind>]: …`.

mod commands;
mod config;
mod failure;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::Context;
use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "mate-optix", version, about = "Membrane-in-cavity optics: spectra, couplings and parameter fits")]
struct Cli {
    /// TOML configuration; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Seed for synthetic noise.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reflection map over membrane position and detuning (map.csv) and
    /// the decay rate and resonant reflection per position (sweep.csv).
    Spectrum,
    /// Coupling table over the membrane offset (couplings.csv) and
    /// closed-form extrema and enhancement ratios (extrema.json).
    Couplings,
    /// Exact resonance branch with the closed form alongside (resonances.csv).
    Resonances,
    /// Transmission spectrum of the tilted mirror-membrane cavity
    /// (tilt.csv, tilt.json).
    Tilt,
    /// Fit measurement data (fit.json, residuals.csv).
    Fit {
        pipeline: Pipeline,
        /// Data file; overrides fit.input from the config.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Write a synthetic data set for a pipeline, with its generating
    /// values (truth.json).
    Synth { pipeline: Pipeline },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Pipeline {
    Map,
    Loss,
    Transmission,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::input("--threads must be ≥ 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::input(format!("thread pool: {e}")))?;
    }
    let input = match &cli.command {
        Command::Fit { input, .. } => input.clone(),
        _ => None,
    };
    let ctx = Context {
        config: RunConfig::load(cli.config.as_deref())?,
        out: cli.out,
        seed: cli.seed,
        input,
    };
    match cli.command {
        Command::Spectrum => commands::spectrum(&ctx),
        Command::Couplings => commands::couplings(&ctx),
        Command::Resonances => commands::resonances(&ctx),
        Command::Tilt => commands::tilt(&ctx),
        Command::Fit { pipeline, .. } => match pipeline {
            Pipeline::Map => commands::fit_map(&ctx),
            Pipeline::Loss => commands::fit_loss(&ctx),
            Pipeline::Transmission => commands::fit_transmission(&ctx),
        },
        Command::Synth { pipeline } => match pipeline {
            Pipeline::Map => commands::synth_map(&ctx),
            Pipeline::Loss => commands::synth_loss(&ctx),
            Pipeline::Transmission => commands::synth_transmission(&ctx),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MATE_OPTIX_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", Failure::input(line));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.kind.exit_code() as u8)
        }
    }
}
