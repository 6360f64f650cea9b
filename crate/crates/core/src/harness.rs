//! Experiment front end: single runs, baseline comparisons and the
//! machine-readable trace/result files.
//!
//! Every reported rate is recomputed with the exact rate model at the final
//! binary association; surrogate values appear only in the trace column
//! reserved for them. Output files are byte-stable across reruns: the
//! wall-clock column in `trace.csv` is written as 0 (measured timings go to
//! stderr when `UAV_RSMA_VERBOSE` is set).

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::rsma::{NetworkState, RateBreakdown};
use crate::scenario::{generate_scenario, initialize, load_scenario, Scenario, ScenarioError};
use crate::solver::{
    equal_split_power, run_bcd, IterationTrace, Scheme, SolverConfig, SolverError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Overrides accepted by the `run` command.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOverrides {
    /// Regenerates the scenario with this seed (requires an embedded
    /// generator spec).
    pub seed: Option<u64>,
    pub t_max: Option<usize>,
}

/// Outcome of one optimization run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub scheme: Scheme,
    pub seed: u64,
    pub final_state: NetworkState,
    /// Rates under the true model (reported everywhere).
    pub true_rates: RateBreakdown,
    /// Rates under the scheme's own link model; differs from `true_rates`
    /// only for the no-geometry scheme.
    pub model_rates: RateBreakdown,
    pub trace: Vec<IterationTrace>,
    /// Measured wall time; never written into result files.
    pub wall_ms: u128,
}

fn verbose() -> bool {
    std::env::var_os("UAV_RSMA_VERBOSE").is_some()
}

/// Applies overrides to a loaded scenario, regenerating it when a different
/// seed is requested.
pub fn apply_overrides(
    scenario: Scenario,
    overrides: RunOverrides,
) -> Result<Scenario, HarnessError> {
    let mut scenario = match overrides.seed {
        Some(seed) if seed != scenario.seed => match &scenario.generator {
            Some(spec) => generate_scenario(spec, seed)?,
            None => {
                return Err(HarnessError::Invalid(
                    "a seed override needs a scenario with an embedded generator spec".into(),
                ))
            }
        },
        _ => scenario,
    };
    if let Some(t_max) = overrides.t_max {
        scenario.solver.t_max = t_max;
    }
    Ok(scenario)
}

/// Runs one scheme on a scenario (no file I/O).
pub fn run_scenario(scenario: &Scenario, scheme: Scheme) -> Result<RunResult, HarnessError> {
    let started = std::time::Instant::now();
    let setup = scenario.setup()?;
    let mut init = initialize(scenario, &setup)?;
    if !scheme.use_common() {
        let server: Vec<Option<usize>> =
            (0..init.num_users()).map(|k| init.assoc.server(k)).collect();
        init.power = equal_split_power(
            init.num_users(),
            init.num_uavs(),
            &server,
            setup.p_max,
            false,
        );
    }
    let outcome = run_bcd(&setup, &init, &scenario.solver, scheme)?;
    let wall_ms = started.elapsed().as_millis();
    if verbose() {
        eprintln!(
            "[{}] seed {} finished in {} ms: min rate {:.4} -> {:.4} bit/s/Hz",
            scheme.name(),
            scenario.seed,
            wall_ms,
            outcome.trace[0].min_rate_true,
            outcome.true_rates.min_rate
        );
    }
    Ok(RunResult {
        scheme,
        seed: scenario.seed,
        final_state: outcome.final_state,
        true_rates: outcome.true_rates,
        model_rates: outcome.model_rates,
        trace: outcome.trace,
        wall_ms,
    })
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

pub const TRACE_HEADER: &str = "iter,min_rate,surrogate_obj,penalty,max_gap,zeta,los_violations,wall_ms";

/// Renders the trace as CSV. The wall_ms column is zeroed so identical runs
/// produce identical bytes.
pub fn trace_csv(trace: &[IterationTrace]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for row in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},0\n",
            row.iter,
            row.min_rate_true,
            row.surrogate_objective,
            row.penalty_value,
            row.max_integrality_gap,
            row.zeta,
            row.los_violations
        ));
    }
    out
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ResultFile<'a> {
    scheme: &'a str,
    seed: u64,
    min_rate: f64,
    /// Final min-rate under the scheme's own link model.
    model_min_rate: f64,
    per_user_rates: &'a [f64],
    per_user_common: &'a [f64],
    per_user_private: &'a [f64],
    positions: &'a [crate::geometry::Point3],
    power: PowerFile<'a>,
    association: &'a [Vec<f64>],
    iterations: usize,
    config: &'a SolverConfig,
}

#[derive(Serialize)]
struct PowerFile<'a> {
    common: &'a [f64],
    private: &'a [Vec<f64>],
}

pub fn result_json(result: &RunResult, config: &SolverConfig) -> String {
    let file = ResultFile {
        scheme: result.scheme.name(),
        seed: result.seed,
        min_rate: result.true_rates.min_rate,
        model_min_rate: result.model_rates.min_rate,
        per_user_rates: &result.true_rates.per_user_total,
        per_user_common: &result.true_rates.per_user_common,
        per_user_private: &result.true_rates.per_user_private,
        positions: &result.final_state.positions,
        power: PowerFile {
            common: &result.final_state.power.common,
            private: &result.final_state.power.private,
        },
        association: &result.final_state.assoc.values,
        iterations: result.trace.len().saturating_sub(1),
        config,
    };
    let mut text = serde_json::to_string_pretty(&file).expect("result serializes");
    text.push('\n');
    text
}

/// Writes `trace.csv` and `result.json` into `out_dir`.
pub fn write_run_outputs(
    result: &RunResult,
    config: &SolverConfig,
    out_dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("trace.csv"), trace_csv(&result.trace))?;
    std::fs::write(out_dir.join("result.json"), result_json(result, config))?;
    Ok(())
}

/// Loads a scenario, applies overrides, runs one scheme and writes the
/// output files.
pub fn run_experiment(
    scenario_path: &Path,
    scheme: Scheme,
    overrides: RunOverrides,
    out_dir: &Path,
) -> Result<RunResult, HarnessError> {
    let scenario = apply_overrides(load_scenario(scenario_path)?, overrides)?;
    let result = run_scenario(&scenario, scheme)?;
    write_run_outputs(&result, &scenario.solver, out_dir)?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Baseline comparison
// ---------------------------------------------------------------------------

pub const COMPARE_SCHEMES: [Scheme; 5] = [
    Scheme::Rsma,
    Scheme::Noma,
    Scheme::FixedPosition,
    Scheme::FixedPower,
    Scheme::NoGeometry,
];

/// One cell of the comparison table.
#[derive(Debug, Clone)]
pub struct ComparisonCell {
    pub scheme: Scheme,
    pub seed: u64,
    pub users: usize,
    pub result: Result<f64, String>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub cells: Vec<ComparisonCell>,
}

impl ComparisonReport {
    pub fn min_rate(&self, scheme: Scheme, seed: u64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.scheme == scheme && c.seed == seed)
            .and_then(|c| c.result.as_ref().ok().copied())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,seed,users,min_rate,status\n");
        for cell in &self.cells {
            match &cell.result {
                Ok(rate) => out.push_str(&format!(
                    "{},{},{},{},ok\n",
                    cell.scheme.name(),
                    cell.seed,
                    cell.users,
                    rate
                )),
                Err(message) => out.push_str(&format!(
                    "{},{},{},,error: {}\n",
                    cell.scheme.name(),
                    cell.seed,
                    cell.users,
                    message.replace([',', '\n'], ";")
                )),
            }
        }
        out
    }
}

/// Runs every scheme over the given seeds; each run owns its own output
/// directory under `out_dir`. Failed cells are flagged, not fatal.
pub fn compare_baselines(
    scenario_path: &Path,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<ComparisonReport, HarnessError> {
    let base = load_scenario(scenario_path)?;
    compare_baselines_on(&base, seeds, out_dir)
}

pub fn compare_baselines_on(
    base: &Scenario,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<ComparisonReport, HarnessError> {
    std::fs::create_dir_all(out_dir)?;
    let mut jobs = Vec::new();
    for &seed in seeds {
        let scenario = apply_overrides(base.clone(), RunOverrides { seed: Some(seed), t_max: None })?;
        for scheme in COMPARE_SCHEMES {
            jobs.push((scenario.clone(), scheme, seed));
        }
    }

    let cells: Vec<ComparisonCell> = jobs
        .par_iter()
        .map(|(scenario, scheme, seed)| {
            let dir = out_dir.join(format!("{}-seed{}", scheme.name(), seed));
            let outcome = run_scenario(scenario, *scheme).and_then(|result| {
                write_run_outputs(&result, &scenario.solver, &dir)?;
                Ok(result.true_rates.min_rate)
            });
            ComparisonCell {
                scheme: *scheme,
                seed: *seed,
                users: scenario.num_users(),
                result: outcome.map_err(|e| e.to_string()),
                out_dir: dir,
            }
        })
        .collect();

    let report = ComparisonReport { cells };
    std::fs::write(out_dir.join("comparison.csv"), report.to_csv())?;
    Ok(report)
}

/// Prints the comparison as a per-scheme table to the given writer.
pub fn print_report(report: &ComparisonReport, mut w: impl Write) -> std::io::Result<()> {
    let mut seeds: Vec<u64> = report.cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    write!(w, "{:<16}", "scheme")?;
    for seed in &seeds {
        write!(w, "  seed {seed:<8}")?;
    }
    writeln!(w)?;
    for scheme in COMPARE_SCHEMES {
        write!(w, "{:<16}", scheme.name())?;
        for &seed in &seeds {
            match report.min_rate(scheme, seed) {
                Some(rate) => write!(w, "  {rate:<13.4}")?,
                None => write!(w, "  {:<13}", "failed")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}
