use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsp::commands;
use gsp::{CliError, Overrides, RunConfig};
use gsp_core::optim::Method;

#[derive(Parser)]
#[command(name = "gsp", version, about = "Sparse graph prompt tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a backbone with EdgePred and write backbone.json.
    Pretrain(RunArgs),
    /// Tune one method once per seed.
    Tune(RunArgs),
    /// Tune over a lambda grid and pick lambda by validation accuracy.
    Sweep(RunArgs),
    /// Compare the report.json of several run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Where to write comparison.csv and comparison.txt.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    plots: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::from_file(&self.config)?;
        config.apply(&Overrides {
            seed: self.seed,
            lambda: self.lambda,
            method: self.method,
            plots: self.plots,
            out: self.out.clone(),
        });
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain(args) => {
            let mut config = args.load()?;
            if let Some(seed) = args.seed {
                config.pretrain.seed = seed;
            }
            let path = commands::pretrain(&config)?;
            println!("wrote {}", path.display());
        }
        Command::Tune(args) => {
            let report = commands::tune(&args.load()?)?;
            let cell = report.accuracy.map_or_else(|| "-".into(), |a| a.cell);
            println!("{} accuracy {cell} ({} ms)", report.method, report.wall_ms);
        }
        Command::Sweep(args) => {
            let report = commands::sweep(&args.load()?)?;
            let cell = report.accuracy.map_or_else(|| "-".into(), |a| a.cell);
            println!(
                "{} best lambda {} accuracy {cell} ({} ms)",
                report.method,
                report.chosen_lambda.unwrap_or(0.0),
                report.wall_ms
            );
        }
        Command::Report { dirs, out } => {
            let (_, text) = commands::report(&dirs, &out)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gsp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
