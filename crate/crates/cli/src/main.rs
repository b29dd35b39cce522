//! `qndsim`: runs pipeline stages from a JSON configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use qndsim::pipeline::{Pipeline, PipelineConfig, Stage};
use qndsim::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Motion {
    On,
    Off,
}

/// Simulate and analyse dispersive QND probing of a trapped atomic ensemble.
///
/// Settings come from the configuration file (or built-in defaults), then
/// `QNDSIM_*` environment variables (e.g. `QNDSIM_ENSEMBLE__TEMPERATURE_UK=120`),
/// then the flags below.
#[derive(Debug, Parser)]
#[command(name = "qndsim", version)]
struct Cli {
    /// JSON configuration file; defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of shots written by the `simulate` stage.
    #[arg(long, value_name = "INT")]
    shots: Option<usize>,
    /// calibrate, simulate, fit, noise-scan, covariance, matched-filter, qnd or all.
    #[arg(long, value_name = "NAME", default_value = "all")]
    stage: String,
    /// Atomic motion in the trap.
    #[arg(long, value_enum)]
    motion: Option<Motion>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownStage(_) => 2,
        Error::Calibration(_) => 3,
        Error::Numeric(_) | Error::Singular(_) | Error::Domain(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let stage: Stage = cli.stage.parse()?;
    let env = std::env::vars();
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path, env)?,
        None => PipelineConfig::from_defaults(env)?,
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    if let Some(shots) = cli.shots {
        cfg.shot_count = shots;
    }
    if let Some(m) = cli.motion {
        cfg.ensemble.motion_enabled = matches!(m, Motion::On);
    }
    let pipeline = Pipeline::new(cfg)?;
    let manifest = pipeline.run(stage)?;
    println!("config {}", manifest.config_hash);
    for (name, files) in &manifest.stages {
        let secs = manifest.timings_s.get(name).copied().unwrap_or(f64::NAN);
        println!("{name:>15}  {secs:8.2} s  {} file(s)", files.len());
    }
    println!("manifest {}", pipeline.out_dir().join("manifest.json").display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
