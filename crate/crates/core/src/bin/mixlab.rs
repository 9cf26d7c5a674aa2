use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mixlab::config::ExperimentConfig;
use mixlab::runner;
use mixlab::MixlabError;

#[derive(Parser)]
#[command(name = "mixlab", version, about = "Mixing and enhanced-dissipation experiments for 2D Hamiltonian flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Worker threads; falls back to MIXLAB_WORKERS, then the config.
        #[arg(long, env = "MIXLAB_WORKERS")]
        workers: Option<usize>,
    },
    /// Parse and range-check a config file without running it.
    Validate { config: PathBuf },
}

fn fail(err: &MixlabError) -> ExitCode {
    println!("{}", runner::error_json(err));
    match err {
        MixlabError::Config(_) | MixlabError::UnknownExperiment(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match ExperimentConfig::load(&config).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => {
                println!("{}", serde_json::json!({ "valid": true, "experiment": c.experiment }));
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run { config, output_dir, workers } => {
            let result = ExperimentConfig::load(&config).and_then(|c| runner::run(&c, output_dir.as_deref(), workers));
            match result {
                Ok(m) => {
                    log::info!("{} finished in {:.3} s", m.experiment, m.wall_time_s);
                    println!("{}", serde_json::json!({ "ok": true, "experiment": m.experiment, "artifacts": m.artifacts }));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    }
}
