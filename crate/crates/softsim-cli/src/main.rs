//! `softsim` command-line harness: experiment runner, gradient checker,
//! method/preset sweep, recorded-data replay, and mesh tooling.

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use softsim_cli::{commands, Failure};

#[derive(Parser)]
#[command(
    name = "softsim",
    version,
    about = "Differentiable XPBD soft-body estimation harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config against a synthetic twin.
    Run(commands::RunArgs),
    /// Compare reverse-mode gradients against finite differences.
    Gradcheck(commands::GradcheckArgs),
    /// Run all methods against all initialization presets.
    Sweep(commands::SweepArgs),
    /// Run the estimator against a recorded observation directory.
    Replay(commands::ReplayArgs),
    /// Build, extrude, import, or save meshes.
    Mesh(commands::MeshArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => commands::run(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
        Command::Sweep(args) => commands::sweep(args),
        Command::Replay(args) => commands::replay(args),
        Command::Mesh(args) => commands::mesh(args),
    };
    match result {
        Ok(()) => ExitCode::from(0),
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
