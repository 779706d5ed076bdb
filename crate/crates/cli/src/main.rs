use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sbl_doa::formats::{parse_override, Override};
use sbl_doa_cli::{run, CliError, Command, RunManifest};

/// Sparse Bayesian learning DoA estimation: simulate, solve, sweep, gram.
#[derive(Parser)]
#[command(name = "sbl-doa", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize snapshots from a scene config.
    Simulate(Common),
    /// Run one method on a snapshot file.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Snapshot file written by `simulate`.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Run a Monte Carlo experiment.
    Sweep(Common),
    /// Write the dictionary and its Gram matrix.
    Gram(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", env = "SBL_DOA_OUT", default_value = ".")]
    out: PathBuf,
    /// Base random seed (overrides the config).
    #[arg(long, env = "SBL_DOA_SEED")]
    seed: Option<u64>,
    /// Monte Carlo runs per sweep value (overrides the config).
    #[arg(long, env = "SBL_DOA_RUNS")]
    runs: Option<usize>,
    /// Config override `dotted.path=value`; the value is read as JSON when
    /// possible, else as a string. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_set)]
    set: Vec<Override>,
}

fn parse_set(text: &str) -> Result<Override, String> {
    parse_override(text).map_err(|e| e.to_string())
}

fn manifest(command: Command, common: Common, input: Option<PathBuf>) -> RunManifest {
    RunManifest {
        command,
        config_path: common.config,
        input_path: input,
        output_dir: common.out,
        seed: common.seed,
        runs: common.runs,
        overrides: common.set,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let m = match cli.command {
        Cmd::Simulate(c) => manifest(Command::Simulate, c, None),
        Cmd::Solve { common, input } => manifest(Command::Solve, common, Some(input)),
        Cmd::Sweep(c) => manifest(Command::Sweep, c, None),
        Cmd::Gram(c) => manifest(Command::Gram, c, None),
    };
    match run(&m) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sbl-doa: {e}");
            ExitCode::from(CliError::exit_code(&e) as u8)
        }
    }
}
