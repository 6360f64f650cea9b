//! Command-line front end: generate scenarios, run the optimizer and the
//! baselines, and emit machine-readable traces and results.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uav_rsma::harness::{self, RunOverrides};
use uav_rsma::scenario::{self, GenSpec};
use uav_rsma::solver::Scheme;

#[derive(Parser)]
#[command(name = "uav-rsma", version, about = "Multi-UAV RSMA placement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario file from a generator spec.
    Gen(GenArgs),
    /// Run one optimization scheme on a scenario.
    Run(RunArgs),
    /// Run all schemes over several seeds and tabulate min-rates.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator spec (JSON). Defaults to the bundled 3-UAV/12-user layout.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = uav_rsma::scenario::BUNDLED_SEED)]
    seed: u64,
    /// Output scenario path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// rsma | noma | fixed-position | fixed-power | no-geometry
    #[arg(long, default_value = "rsma")]
    scheme: String,
    /// Regenerate the scenario with this seed (needs an embedded generator).
    #[arg(long)]
    seed: Option<u64>,
    /// Override the iteration count.
    #[arg(long)]
    tmax: Option<usize>,
    /// Output directory for trace.csv and result.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Comma-separated seeds; defaults to the bundled comparison seeds.
    #[arg(long, value_delimiter = ',', default_values_t = uav_rsma::scenario::BUNDLED_COMPARE_SEEDS)]
    seeds: Vec<u64>,
    /// Output directory; each run gets its own subdirectory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(args) => {
            let spec = match &args.spec {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<GenSpec>(&text)
                        .with_context(|| format!("parsing {}", path.display()))?
                }
                None => GenSpec::default(),
            };
            let generated = scenario::generate_scenario(&spec, args.seed)?;
            scenario::save_scenario(&generated, &args.out)?;
            println!(
                "wrote {} ({} buildings, {} users, {} UAVs)",
                args.out.display(),
                generated.buildings.len(),
                generated.users.len(),
                generated.uav_count
            );
        }
        Command::Run(args) => {
            let Some(scheme) = Scheme::parse(&args.scheme) else {
                bail!("unknown scheme `{}`", args.scheme);
            };
            let overrides = RunOverrides { seed: args.seed, t_max: args.tmax };
            let result = harness::run_experiment(&args.scenario, scheme, overrides, &args.out)?;
            println!(
                "{}: min rate {:.4} -> {:.4} bit/s/Hz ({} iterations, outputs in {})",
                scheme.name(),
                result.trace[0].min_rate_true,
                result.true_rates.min_rate,
                result.trace.len() - 1,
                args.out.display()
            );
        }
        Command::Compare(args) => {
            let report = harness::compare_baselines(&args.scenario, &args.seeds, &args.out)?;
            harness::print_report(&report, std::io::stdout().lock())?;
            let failed: Vec<_> =
                report.cells.iter().filter(|c| c.result.is_err()).collect();
            if !failed.is_empty() {
                eprintln!("{} cell(s) failed; see comparison.csv", failed.len());
            }
            println!("wrote {}", args.out.join("comparison.csv").display());
        }
    }
    Ok(())
}
