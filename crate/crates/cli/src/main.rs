use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semicomp_cli::{run, Command, FailureKind, RunConfig};

/// Hierarchical semi-competing risks analysis of hospital readmission and
/// mortality.
#[derive(Debug, Parser)]
#[command(name = "semicomp", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    args: Args,
}

#[derive(Debug, clap::Args)]
struct Args {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the root seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving artifacts and manifest.json.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Simulate a dataset and its latent truth.
    Simulate,
    /// Fit the illness-death model by MCMC.
    Fit,
    /// Fit, then compute excess readmission and mortality ratios.
    Metrics,
    /// Metrics, then plug-in and loss-based classifications.
    Profile,
    /// Fit the logistic-Normal comparator for both outcomes.
    Glmm,
    /// Full analysis including GLMM reclassification tables.
    Report,
    /// Quadrature node ladder for the ratio computations.
    Sensitivity,
    /// Print an example configuration.
    ExampleConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Fit => Command::Fit,
        Cmd::Metrics => Command::Metrics,
        Cmd::Profile => Command::Profile,
        Cmd::Glmm => Command::Glmm,
        Cmd::Report => Command::Report,
        Cmd::Sensitivity => Command::Sensitivity,
        Cmd::ExampleConfig => {
            print!("{}", RunConfig::example().to_toml());
            return ExitCode::SUCCESS;
        }
    };
    let fail = |kind: FailureKind, msg: String| {
        eprintln!("error: {msg}");
        ExitCode::from(kind.exit_code() as u8)
    };
    let Some(path) = cli.args.config else {
        return fail(FailureKind::Config, "--config is required".into());
    };
    let mut config = match RunConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return fail(FailureKind::Config, format!("{}: {e}", path.display())),
    };
    if let Some(seed) = cli.args.seed {
        config.seed = seed;
    }
    if let Some(n) = cli.args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(FailureKind::Config, format!("--threads: {e}"));
        }
    }
    match run(&config, command, &cli.args.out_dir) {
        Ok(m) => {
            eprintln!(
                "{}: wrote {} artifacts to {}",
                command.name(),
                m.artifacts.len(),
                cli.args.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind, e.to_string()),
    }
}
