//! Command-line front end: reads a JSON problem description, runs the
//! library and writes CSV/JSON results into an output directory.
//!
//! Exit codes: 0 ok, 2 parse error, 3 validation error, 4 solver error,
//! 5 verification failed.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Deserialize;
use serde_json::json;

use crate::bridge_core::{solve_nonsingular, BridgeSolution};
use crate::bridge_singular::{solve_singular, DEFAULT_DELTA_FRACTION};
use crate::dynamics::{LinearSystem, MatrixFunction, SystemOptions, DEFAULT_STEPS};
use crate::error::BridgeError;
use crate::psd::{GaussianMarginal, DEFAULT_RANK_TOL};
use crate::simulate::{simulate_controlled, simulate_reverse, simulate_uncontrolled, Direction, SimulationConfig, SimulationEnsemble};
use crate::verify::{epsilon_errors, run_full_verification, sweep_epsilon_with, Ensembles, VerificationConfig, VerificationReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;
pub const EXIT_VERIFICATION: i32 = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("parse-error: {0}")]
    Parse(String),
    #[error("validation-error: {0}")]
    Validation(String),
    #[error("solver-error: {0}")]
    Solver(String),
    #[error("verification-failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => EXIT_PARSE,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Solver(_) => EXIT_SOLVER,
            CliError::Verification(_) => EXIT_VERIFICATION,
        }
    }
}

impl From<BridgeError> for CliError {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::Dimension(_)
            | BridgeError::InvalidArgument(_)
            | BridgeError::NotSymmetric { .. }
            | BridgeError::NotPsd { .. }
            | BridgeError::SingularGramian { .. }
            | BridgeError::ClipRequired(_)
            | BridgeError::InvalidConfig(_) => CliError::Validation(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// A matrix given either as a constant nested array or as samples on a uniform grid over `[0, T]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Constant(Vec<Vec<f64>>),
    Sampled { sampled: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(rename = "A")]
    pub a: MatrixSpec,
    #[serde(rename = "B")]
    pub b: MatrixSpec,
    #[serde(rename = "T")]
    pub horizon: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalSpec {
    #[serde(rename = "Sigma0")]
    pub sigma0: Vec<Vec<f64>>,
    #[serde(rename = "SigmaT")]
    pub sigma_t: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub steps: usize,
    /// Endpoint clearance; defaults to `1e−3·T`.
    pub delta: Option<f64>,
    pub rank_tol: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, delta: None, rank_tol: DEFAULT_RANK_TOL }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub paths: usize,
    pub step: f64,
    pub seed: u64,
    /// Clip `δ_sim`; defaults to `0.05·T`.
    pub clip: Option<f64>,
    pub direction: Direction,
    /// Also run the uncontrolled dynamics.
    pub uncontrolled: bool,
    /// Also run the time-reversed bridge (implied by `direction = reverse`).
    pub reverse: bool,
    pub noise_scale: f64,
    pub sample_paths: usize,
    pub thin: usize,
    pub memory_budget: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        let d = SimulationConfig::default();
        Self {
            paths: 2000,
            step: d.step,
            seed: d.seed,
            clip: None,
            direction: Direction::Forward,
            uncontrolled: false,
            reverse: false,
            noise_scale: d.noise_scale,
            sample_paths: 50,
            thin: d.thin,
            memory_budget: d.memory_budget,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub system: SystemSpec,
    pub marginals: MarginalSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub verification: VerificationConfig,
}

impl ProblemSpec {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn horizon(&self) -> f64 {
        self.system.horizon
    }

    pub fn delta(&self) -> f64 {
        self.solver.delta.unwrap_or(DEFAULT_DELTA_FRACTION * self.horizon())
    }

    pub fn clip(&self) -> f64 {
        self.simulation.clip.unwrap_or(0.05 * self.horizon())
    }

    pub fn simulation_config(&self, direction: Direction) -> SimulationConfig {
        let s = &self.simulation;
        SimulationConfig {
            paths: s.paths,
            step: s.step,
            seed: s.seed,
            horizon_clip: self.clip(),
            direction,
            noise_scale: s.noise_scale,
            sample_paths: s.sample_paths,
            thin: s.thin,
            memory_budget: s.memory_budget,
        }
    }
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> CliResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Validation(format!("{what} must be a non-empty rectangular nested array")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn to_function(spec: &MatrixSpec, horizon: f64, what: &str) -> CliResult<MatrixFunction> {
    match spec {
        MatrixSpec::Constant(rows) => Ok(MatrixFunction::constant(to_matrix(rows, what)?)),
        MatrixSpec::Sampled { sampled } => {
            let values = sampled.iter().map(|m| to_matrix(m, what)).collect::<CliResult<Vec<_>>>()?;
            Ok(MatrixFunction::sampled(horizon, values)?)
        }
    }
}

/// System and marginals built and validated from a spec.
#[derive(Debug, Clone)]
pub struct Problem {
    pub system: LinearSystem,
    pub m0: GaussianMarginal,
    pub mt: GaussianMarginal,
}

impl Problem {
    pub fn from_spec(spec: &ProblemSpec) -> CliResult<Self> {
        let horizon = spec.horizon();
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(CliError::Validation(format!("T must be positive, got {horizon}")));
        }
        let a = to_function(&spec.system.a, horizon, "A")?;
        let b = to_function(&spec.system.b, horizon, "B")?;
        let options = SystemOptions { steps: spec.solver.steps, rank_tol: spec.solver.rank_tol };
        let system = LinearSystem::with_options(a, b, horizon, options)?;
        let m0 = GaussianMarginal::with_tolerance(&to_matrix(&spec.marginals.sigma0, "Sigma0")?, spec.solver.rank_tol)?;
        let mt = GaussianMarginal::with_tolerance(&to_matrix(&spec.marginals.sigma_t, "SigmaT")?, spec.solver.rank_tol)?;
        let n = system.state_dim();
        if m0.dim() != n || mt.dim() != n {
            return Err(CliError::Validation(format!("Sigma0 and SigmaT must be {n}x{n}")));
        }
        Ok(Self { system, m0, mt })
    }

    /// Singular solver when either marginal is rank deficient, closed forms otherwise.
    pub fn solve(&self, spec: &ProblemSpec) -> CliResult<BridgeSolution> {
        let steps = spec.solver.steps;
        let sol = if self.m0.is_singular() || self.mt.is_singular() {
            solve_singular(&self.system, &self.m0, &self.mt, steps, spec.delta())?
        } else {
            solve_nonsingular(&self.system, &self.m0, &self.mt, steps)?
        };
        Ok(sol)
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn index_names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (1..=rows).flat_map(|i| (1..=cols).map(move |j| format!("{prefix}_{i}{j}"))).collect()
}

fn push_row_major(row: &mut Vec<String>, m: Option<&DMatrix<f64>>, rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            row.push(fmt_value(m.map_or(f64::NAN, |m| m[(i, j)])));
        }
    }
}

/// `t, Sigma_ij, Qinv_ij, Pinv_ij, K_ij` (row-major, 1-based) per grid node.
pub fn solution_csv(sol: &BridgeSolution, input_dim: usize) -> String {
    let n = sol.state_dim();
    let m = input_dim;
    let mut header = vec!["t".to_string()];
    for (p, r, c) in [("Sigma", n, n), ("Qinv", n, n), ("Pinv", n, n), ("K", m, n)] {
        header.extend(index_names(p, r, c));
    }
    let mut out = header.join(",");
    out.push('\n');
    for (k, &t) in sol.grid().iter().enumerate() {
        let mut row = vec![fmt_value(t)];
        push_row_major(&mut row, Some(&sol.sigma()[k]), n, n);
        push_row_major(&mut row, sol.q_inv()[k].as_ref(), n, n);
        push_row_major(&mut row, sol.p_inv()[k].as_ref(), n, n);
        push_row_major(&mut row, sol.gain()[k].as_ref(), m, n);
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `t, mean_i, cov_ij, cov_se_ij, energy, energy_se` per node.
pub fn moments_csv(ens: &SimulationEnsemble) -> String {
    let n = ens.state_dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("mean_{i}")));
    header.extend(index_names("cov", n, n));
    header.extend(index_names("cov_se", n, n));
    header.push("energy".into());
    header.push("energy_se".into());
    let mut out = header.join(",");
    out.push('\n');
    for k in 0..ens.times.len() {
        let mut row = vec![fmt_value(ens.times[k])];
        row.extend(ens.mean[k].iter().map(|&v| fmt_value(v)));
        push_row_major(&mut row, Some(&ens.cov[k]), n, n);
        push_row_major(&mut row, Some(&ens.cov_se[k]), n, n);
        row.push(fmt_value(ens.energy[k]));
        row.push(fmt_value(ens.energy_se[k]));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `t, path_id, x_1, …, x_n` for every stored state.
pub fn paths_csv(ens: &SimulationEnsemble) -> String {
    let n = ens.state_dim();
    let mut out = String::from("t,path_id");
    for i in 1..=n {
        let _ = write!(out, ",x_{i}");
    }
    out.push('\n');
    for (t, s) in ens.sample_times.iter().zip(&ens.samples) {
        for p in 0..s.nrows() {
            let _ = write!(out, "{},{p}", fmt_value(*t));
            for i in 0..n {
                let _ = write!(out, ",{}", fmt_value(s[(p, i)]));
            }
            out.push('\n');
        }
    }
    out
}

fn matrix_json(m: &DMatrix<f64>) -> serde_json::Value {
    json!((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

pub fn solution_metadata(spec: &ProblemSpec, problem: &Problem, sol: &BridgeSolution) -> CliResult<serde_json::Value> {
    let sb = sol.boundary();
    let flags = sol.singular_flags();
    Ok(json!({
        "n": problem.system.state_dim(),
        "m": problem.system.input_dim(),
        "T": problem.system.horizon(),
        "steps": spec.solver.steps,
        "grid_nodes": sol.grid().len(),
        "rank_tol": spec.solver.rank_tol,
        "delta": sol.delta(),
        "clearance": [sol.clearance().0, sol.clearance().1],
        "singular_flags": { "initial": flags.initial, "terminal": flags.terminal },
        "Sigma0_limit": matrix_json(&sb.initial_covariance()?),
        "SigmaT_limit": matrix_json(&sb.terminal_covariance()?),
        "Qinv0": matrix_json(&sb.q0_inv),
        "PinvT": matrix_json(&sb.pt_inv),
        "P0": matrix_json(&sb.p0),
        "QT": matrix_json(&sb.qt),
    }))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    fs::write(dir.join(name), contents).map_err(|e| CliError::Solver(format!("cannot write {}: {e}", dir.join(name).display())))
}

fn prepare_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))
}

fn write_solution(dir: &Path, spec: &ProblemSpec, problem: &Problem, sol: &BridgeSolution) -> CliResult<()> {
    write_file(dir, "solution.csv", &solution_csv(sol, problem.system.input_dim()))?;
    let meta = solution_metadata(spec, problem, sol)?;
    write_file(dir, "metadata.json", &serde_json::to_string_pretty(&meta).expect("metadata serializes"))
}

/// Outcome of a command: lines for stdout and the exit status.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: Vec<String>,
    pub code: i32,
}

pub fn cmd_solve(spec: &ProblemSpec, out: &Path) -> CliResult<Outcome> {
    let problem = Problem::from_spec(spec)?;
    let sol = problem.solve(spec)?;
    prepare_out(out)?;
    write_solution(out, spec, &problem, &sol)?;
    Ok(Outcome { summary: vec![format!("solved on {} nodes", sol.grid().len())], code: EXIT_OK })
}

/// Ensembles requested by the spec, in the order controlled, uncontrolled, reverse.
pub fn run_ensembles(
    spec: &ProblemSpec,
    problem: &Problem,
    sol: &BridgeSolution,
) -> CliResult<(Option<SimulationEnsemble>, Option<SimulationEnsemble>, Option<SimulationEnsemble>)> {
    let s = &spec.simulation;
    let forward = s.direction == Direction::Forward;
    let controlled = if forward { Some(simulate_controlled(&problem.system, sol, &spec.simulation_config(Direction::Forward))?) } else { None };
    let uncontrolled = if s.uncontrolled {
        Some(simulate_uncontrolled(&problem.system, &problem.m0, &spec.simulation_config(Direction::Forward))?)
    } else {
        None
    };
    let reverse = if !forward || s.reverse {
        Some(simulate_reverse(&problem.system, sol, &problem.mt, &spec.simulation_config(Direction::Reverse))?)
    } else {
        None
    };
    Ok((controlled, uncontrolled, reverse))
}

pub fn cmd_simulate(spec: &ProblemSpec, out: &Path) -> CliResult<Outcome> {
    let problem = Problem::from_spec(spec)?;
    let sol = problem.solve(spec)?;
    let (controlled, uncontrolled, reverse) = run_ensembles(spec, &problem, &sol)?;
    prepare_out(out)?;
    write_solution(out, spec, &problem, &sol)?;
    let mut summary = Vec::new();
    let primary = controlled.as_ref().or(reverse.as_ref()).expect("one direction always runs");
    write_file(out, "moments.csv", &moments_csv(primary))?;
    write_file(out, "paths.csv", &paths_csv(primary))?;
    summary.push(format!("{} paths on {} nodes", primary.paths, primary.times.len()));
    if let Some(u) = &uncontrolled {
        write_file(out, "moments_uncontrolled.csv", &moments_csv(u))?;
        write_file(out, "paths_uncontrolled.csv", &paths_csv(u))?;
    }
    if let (Some(r), Some(_)) = (&reverse, &controlled) {
        write_file(out, "moments_reverse.csv", &moments_csv(r))?;
        write_file(out, "paths_reverse.csv", &paths_csv(r))?;
    }
    Ok(Outcome { summary, code: EXIT_OK })
}

fn report_outcome(report: &VerificationReport) -> Outcome {
    let passed = report.checks.iter().filter(|c| c.passed()).count();
    let mut summary = vec![format!("{passed}/{} checks passed", report.checks.len())];
    match report.first_failure() {
        Some(c) => {
            summary.push(format!("first failing check: {}", c.name));
            Outcome { summary, code: EXIT_VERIFICATION }
        }
        None => Outcome { summary, code: EXIT_OK },
    }
}

pub fn cmd_verify(spec: &ProblemSpec, out: &Path) -> CliResult<Outcome> {
    let problem = match Problem::from_spec(spec) {
        Ok(p) => p,
        Err(CliError::Validation(msg)) if msg.starts_with("singular-gramian") => {
            prepare_out(out)?;
            let report = VerificationReport::precondition_failure(msg);
            write_file(out, "report.json", &report.to_json())?;
            return Ok(report_outcome(&report));
        }
        Err(e) => return Err(e),
    };
    let sol = problem.solve(spec)?;
    let (controlled, uncontrolled, reverse) = run_ensembles(spec, &problem, &sol)?;
    let ensembles = Ensembles { controlled: controlled.as_ref(), uncontrolled: uncontrolled.as_ref(), reverse: reverse.as_ref() };
    let report = run_full_verification(&problem.system, &problem.m0, &problem.mt, &sol, &ensembles, &spec.verification);
    prepare_out(out)?;
    write_file(out, "report.json", &report.to_json())?;
    Ok(report_outcome(&report))
}

pub fn cmd_sweep(spec: &ProblemSpec, out: &Path) -> CliResult<Outcome> {
    let problem = Problem::from_spec(spec)?;
    let eps = &spec.verification.eps_list;
    let entries = epsilon_errors(&problem.system, &problem.m0, &problem.mt, eps)?;
    let mut csv = String::from("eps,q0_inverse_error,pt_inverse_error\n");
    for e in &entries {
        let v = |r: &crate::error::Result<f64>| fmt_value(*r.as_ref().unwrap_or(&f64::NAN));
        let _ = writeln!(csv, "{},{},{}", fmt_value(e.eps), v(&e.q0_error), v(&e.pt_error));
    }
    let report = sweep_epsilon_with(&problem.system, &problem.m0, &problem.mt, eps, &spec.verification);
    prepare_out(out)?;
    write_file(out, "sweep.csv", &csv)?;
    write_file(out, "report.json", &report.to_json())?;
    Ok(report_outcome(&report))
}

#[derive(Debug, Parser)]
#[command(name = "covbridge", version, about = "Gaussian bridges between possibly degenerate marginals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct CommonArgs {
    /// Problem description (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides simulation.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve and write solution.csv and metadata.json.
    Solve(CommonArgs),
    /// Solve, simulate and write moments.csv and paths.csv.
    Simulate(CommonArgs),
    /// Run every cross-check and write report.json.
    Verify(CommonArgs),
    /// Run the ε-sweep alone and write sweep.csv and report.json.
    Sweep(CommonArgs),
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (common, f): (&CommonArgs, fn(&ProblemSpec, &Path) -> CliResult<Outcome>) = match &cli.command {
        Command::Solve(a) => (a, cmd_solve),
        Command::Simulate(a) => (a, cmd_simulate),
        Command::Verify(a) => (a, cmd_verify),
        Command::Sweep(a) => (a, cmd_sweep),
    };
    let result = ProblemSpec::load(&common.spec).and_then(|mut spec| {
        if let Some(seed) = common.seed {
            spec.simulation.seed = seed;
        }
        f(&spec, &common.out)
    });
    match result {
        Ok(outcome) => {
            if outcome.code != EXIT_OK {
                if let Some(line) = outcome.summary.last() {
                    eprintln!("{line}");
                }
            }
            if !common.quiet {
                for line in &outcome.summary {
                    println!("{line}");
                }
            }
            outcome.code
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
