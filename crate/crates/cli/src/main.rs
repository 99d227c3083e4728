//! `mscr`: scenario runner for the magnetic soft-continuum-robot toolkit.
//!
//! Every subcommand reads one layered TOML configuration (embedded defaults,
//! optional `--config` file, `--set` overrides), writes CSV/PGM artifacts
//! into the output directory, and finishes with an atomically written
//! `manifest.json` recording the config hash and the emitted files.

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::SystemTime;

/// Failure modes, partitioned by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Configuration or validation problem (exit code 2).
    Config(String),
    /// Module or I/O failure during the run (exit code 1).
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl std::fmt::Display) -> Self {
        CliError::Config(msg.to_string())
    }

    pub fn runtime(msg: impl std::fmt::Display) -> Self {
        CliError::Runtime(msg.to_string())
    }
}

const AFTER_HELP: &str = concat!(
    "Configuration is layered: embedded defaults, then --config, then --set \
     overrides in order, then --seed. The defaults file (crates/cli/defaults.toml) \
     is embedded verbatim and reads:\n\n",
    include_str!("../defaults.toml")
);

#[derive(Parser)]
#[command(
    name = "mscr",
    version,
    about = "Simulation and analysis tools for magnetically steered soft continuum robots",
    after_long_help = AFTER_HELP
)]
struct Cli {
    /// Scenario configuration file (TOML), merged over the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory (default: $MSCR_OUT/<subcommand> or out/<subcommand>).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Shorthand for --set sim.seed=<N>, applied last.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override one config key, e.g. --set controller.variant=damped.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the magnet's dipole moment to on-axis field samples.
    Calibrate,
    /// Tabulate field magnitude and gradient components along the magnet axis.
    Fieldmap,
    /// Sweep the magnet rotation and report the reachable tip-angle interval.
    Sweep,
    /// Compare the analytic tip sensitivity against finite differences.
    JacobianMap,
    /// Locate the actuation singularities at each magnet height.
    Singularities,
    /// Report the magnet-distance feasibility bound.
    Feasibility,
    /// Run one closed-loop tip-angle regulation scenario.
    Simulate,
    /// Read the tip angle from every frame in a directory.
    Track,
    /// Steer the tip along a waypoint path with the translating base.
    FollowPath,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Fieldmap => "fieldmap",
            Command::Sweep => "sweep",
            Command::JacobianMap => "jacobian-map",
            Command::Singularities => "singularities",
            Command::Feasibility => "feasibility",
            Command::Simulate => "simulate",
            Command::Track => "track",
            Command::FollowPath => "follow-path",
        }
    }
}

fn output_dir(cli: &Cli) -> PathBuf {
    if let Some(dir) = &cli.out {
        return dir.clone();
    }
    let root = std::env::var_os("MSCR_OUT").map_or_else(|| PathBuf::from("out"), PathBuf::from);
    root.join(cli.command.name())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let started = SystemTime::now();
    let (config, config_bytes) =
        config::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    let out_dir = output_dir(cli);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    let files = match cli.command {
        Command::Calibrate => commands::calibrate(&config, &out_dir)?,
        Command::Fieldmap => commands::fieldmap(&config, &out_dir)?,
        Command::Sweep => commands::sweep(&config, &out_dir)?,
        Command::JacobianMap => commands::jacobian_map(&config, &out_dir)?,
        Command::Singularities => commands::singularities(&config, &out_dir)?,
        Command::Feasibility => commands::feasibility(&config, &out_dir)?,
        Command::Simulate => commands::simulate(&config, &out_dir)?,
        Command::Track => commands::track(&config, &out_dir)?,
        Command::FollowPath => commands::follow_path(&config, &out_dir)?,
    };

    let mut manifest = manifest::RunManifest::new(cli.command.name(), &config_bytes, started);
    manifest.files = files;
    manifest.write(&out_dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("mscr: configuration error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("mscr: {msg}");
            ExitCode::from(1)
        }
    }
}
