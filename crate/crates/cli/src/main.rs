use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forgetnet_cli::{run, CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "forgetnet", version, about = "Train and probe MLPs with forgetting layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `data.dir` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out, data } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply(&Overrides {
                seed,
                out_dir: out,
                data_dir: data,
            });
            let summary = run(&cfg)?;
            println!(
                "{}",
                serde_json::to_string(&summary).expect("summary serializes")
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = e.report();
            eprintln!("{}", serde_json::to_string(&report).expect("error report serializes"));
            ExitCode::from(report.exit_code as u8)
        }
    }
}
