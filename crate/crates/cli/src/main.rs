use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use llgrid::commands::{cmd_competitor, cmd_plot, cmd_solve, cmd_sweep, cmd_verify};
use llgrid::config::ExperimentConfig;
use llgrid::error::CliResult;

#[derive(Debug, Parser)]
#[command(version, about = "Grid experiments for the Fisher-regularized Levy-Lieb functional")]
struct Cli {
    /// Flat key=value config file
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set eps=1e-2,1e-3
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides output.dir)
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Minimize at every eps and write checkpoints
    Solve {
        /// Start from matching checkpoints in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Run the property suites, optionally on a density file too
    Verify {
        #[arg(long)]
        density: Option<PathBuf>,
    },
    /// Build the marginal-swap competitor and compare energies
    Competitor {
        #[arg(long)]
        density: Option<PathBuf>,
    },
    /// Diagonal mass against the localization bound over the eps list
    Sweep {
        /// Comma-separated eps values
        #[arg(long)]
        eps_list: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Cost family: coulomb, power, table or zero
        #[arg(long)]
        cost: Option<String>,
        /// Grid points per axis
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Render ln(diag_mass) against sqrt(alpha/eps) from a sweep CSV
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "sweep.svg")]
        output: PathBuf,
    },
}

fn load(cli: &Cli, extra: Vec<String>) -> CliResult<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(extra);
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, &overrides)?,
        None => ExperimentConfig::from_text("", &std::env::current_dir()?, &overrides)?,
    };
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Solve { resume } => cmd_solve(&load(&cli, Vec::new())?, *resume),
        Command::Verify { density } => cmd_verify(&load(&cli, Vec::new())?, density.as_deref()),
        Command::Competitor { density } => cmd_competitor(&load(&cli, Vec::new())?, density.as_deref()),
        Command::Sweep {
            eps_list,
            alpha,
            beta,
            cost,
            grid,
        } => {
            let mut extra = Vec::new();
            if let Some(v) = eps_list {
                extra.push(format!("eps={v}"));
            }
            if let Some(v) = alpha {
                extra.push(format!("alpha={v}"));
            }
            if let Some(v) = beta {
                extra.push(format!("beta={v}"));
            }
            if let Some(v) = cost {
                extra.push(format!("cost.family={v}"));
            }
            if let Some(v) = grid {
                extra.push(format!("grid.m={v}"));
            }
            cmd_sweep(&load(&cli, extra)?)
        }
        Command::Plot { input, output } => cmd_plot(input, output),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("llgrid: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
