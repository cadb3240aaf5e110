use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use wharmonic::cli::{self, CliResult, EXIT_INVALID, EXIT_OK};

/// Harmonic maps into Wasserstein space.
#[derive(Parser)]
#[command(name = "wharmonic", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve, run the checks and write the artifacts to out_dir.
    Run { config: PathBuf },
    /// Node-wise W2 and energy deltas between two run directories.
    Compare { dir_a: PathBuf, dir_b: PathBuf },
    /// Re-run the checks on the solution stored in out_dir.
    Check { config: PathBuf },
    /// Approximate energies Dir_ε of the stored solution.
    DirEps {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        eps: Vec<f64>,
    },
}

fn emit<T: Serialize>(r: CliResult<T>, code: impl Fn(&T) -> i32) -> i32 {
    match r {
        Ok(v) => {
            match serde_json::to_string_pretty(&v) {
                Ok(s) => println!("{s}"),
                Err(e) => eprintln!("error: {e}"),
            }
            code(&v)
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_INVALID
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.cmd {
        Cmd::Run { config } => emit(cli::run(&config), |o| o.code),
        Cmd::Check { config } => emit(cli::check(&config), |o| o.code),
        Cmd::Compare { dir_a, dir_b } => emit(cli::compare(&dir_a, &dir_b), |_| EXIT_OK),
        Cmd::DirEps { config, eps } => emit(cli::dir_eps_command(&config, &eps), |_| EXIT_OK),
    };
    ExitCode::from(code as u8)
}
