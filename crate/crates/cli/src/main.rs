use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ipp_core::bench::{
    aggregate, export_ply, format_report, load_summaries, run_experiment, write_run, RunStatus, Scenario,
    ScenarioConfig,
};
use ipp_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_COLLISION: u8 = 3;

#[derive(Parser)]
#[command(name = "ipp", version, about = "Informative path planning benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario with one seed.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Override the simulated-time budget, seconds.
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Run seeds `first-seed .. first-seed + seeds`, one subdirectory each.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Aggregate the summaries found in a run or sweep directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write the surface points of a run directory as a PLY point cloud.
    ExportPly {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>, budget: Option<f64>) -> Result<Scenario, Error> {
    let mut sc = ScenarioConfig::load(path)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    if let Some(b) = budget {
        sc.budget_s = b;
        sc.validate()?;
    }
    Ok(sc)
}

/// Runs and writes one seed. Returns whether it collided.
fn run_one(sc: &Scenario, out: &Path) -> Result<bool, Error> {
    let started = std::time::Instant::now();
    let res = run_experiment(sc)?;
    write_run(out, &res)?;
    let s = &res.summary;
    eprintln!(
        "{} seed {}: {:?}, exploration {:.3}, error {}, {:.1} m, {:.1} s wall",
        s.label,
        s.seed,
        s.status,
        s.final_exploration_ratio,
        s.final_reconstruction_error
            .map_or_else(|| "-".to_string(), |e| format!("{e:.4} m")),
        s.distance_m,
        started.elapsed().as_secs_f64()
    );
    if let Some(f) = &s.failure {
        eprintln!("  {f}");
    }
    Ok(s.status == RunStatus::Collision)
}

fn execute(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            budget,
        } => {
            let sc = load(&scenario, seed, budget)?;
            Ok(if run_one(&sc, &out)? { EXIT_COLLISION } else { 0 })
        }
        Command::Sweep {
            scenario,
            seeds,
            first_seed,
            out,
            budget,
        } => {
            let base = load(&scenario, None, budget)?;
            let mut collided = false;
            for seed in first_seed..first_seed + seeds {
                let sc = Scenario { seed, ..base.clone() };
                collided |= run_one(&sc, &out.join(format!("seed_{seed:03}")))?;
            }
            let rows = aggregate(&load_summaries(&out)?)?;
            print!("{}", format_report(&rows));
            Ok(if collided { EXIT_COLLISION } else { 0 })
        }
        Command::Report { input } => {
            let rows = aggregate(&load_summaries(&input)?)?;
            print!("{}", format_report(&rows));
            Ok(0)
        }
        Command::ExportPly { input } => {
            let path = export_ply(&input)?;
            println!("{}", path.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
                Error::Collision { .. } => EXIT_COLLISION,
                _ => EXIT_FAILURE,
            })
        }
    }
}
