//! `teugels` command line: basis, simulate, solve and verify runs.
//!
//! Exit codes: 0 pass, 1 analytic failure, 2 configuration or I/O error,
//! 3 violated experiment hypothesis.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{
    builtin_linear_cases, comparison_experiment, convergence_experiment, linear_proposition_check, perturb,
    stability_experiment, AnalysisError, Experiment,
};
use crate::config::{parse_config, ExperimentKind, RunConfig};
use crate::fbsde_problem::{check_h2, check_v0, lipschitz_audit, solution_norm, FbsdeProblem, ProbeOptions};
use crate::levy_model::moments;
use crate::path_engine::{export_bundle, martingale_diagnostics, simulate, TimeGrid};
use crate::solver::{derive_seed, glue_solve, Noise, SolverError};
use crate::teugels_basis::{build_basis, check_lemma_identity, TeugelsBasis};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_HYPOTHESIS: i32 = 3;

/// Residual bound for the basis command.
pub const BASIS_TOLERANCE: f64 = 1e-8;

const AUDIT_STREAM: u64 = u64::MAX - 2;

#[derive(Debug, Parser)]
#[command(name = "teugels", version, about = "Teugels martingale bases and coupled FBSDE solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the Teugels basis and check its polynomial identities.
    Basis(CommonArgs),
    /// Simulate Teugels increments and dump the bundle.
    Simulate(CommonArgs),
    /// Solve the configured FBSDE over the full horizon.
    Solve(CommonArgs),
    /// Run a verification experiment.
    Verify {
        #[arg(long, value_enum)]
        experiment: Option<ExperimentKind>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: config `output`, else `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Failure(String),
    Hypothesis(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Failure(_) => EXIT_FAIL,
            CliError::Hypothesis(_) => EXIT_HYPOTHESIS,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Failure(m) | CliError::Hypothesis(m) => m,
        }
    }
}

fn config_err(e: impl Display) -> CliError {
    CliError::Config(e.to_string())
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::InvalidConfig(_) | SolverError::Path(_) => CliError::Config(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Solver(s) => s.into(),
            AnalysisError::HypothesisViolated(_) => CliError::Hypothesis(e.to_string()),
            AnalysisError::Invalid(_) => CliError::Config(e.to_string()),
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (common, experiment) = match &cli.command {
        Command::Basis(c) | Command::Simulate(c) | Command::Solve(c) => (c, None),
        Command::Verify { experiment, common } => (common, *experiment),
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(common.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_CONFIG;
        }
    };
    match pool.install(|| execute(&cli.command, common, experiment)) {
        Ok(true) => EXIT_PASS,
        Ok(false) => EXIT_FAIL,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

struct Run {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

fn load(common: &CommonArgs) -> Result<Run, CliError> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let cfg = parse_config(&text).map_err(config_err)?;
    let seed = common
        .seed
        .or(cfg.seed)
        .ok_or_else(|| CliError::Config("no seed: set `seed` in the config or pass --seed".into()))?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
    Ok(Run { cfg, seed, out })
}

fn noise(cfg: &RunConfig) -> Result<Noise, CliError> {
    let model = cfg.model.build().map_err(config_err)?;
    let table = moments(&model, 2 * cfg.basis.k + 2).map_err(config_err)?;
    let basis = build_basis(&table, cfg.basis.k, cfg.basis.rank_tol).map_err(|e| CliError::Failure(e.to_string()))?;
    Ok(Noise::new(model, basis))
}

fn problem(run: &Run, noise: &Noise) -> Result<FbsdeProblem, CliError> {
    run.cfg
        .problem
        .build(noise.channels(), run.cfg.grid.horizon)
        .map_err(config_err)
}

fn write_file(dir: &Path, name: &str, body: &[u8]) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut body = serde_json::to_vec_pretty(value).map_err(|e| CliError::Failure(e.to_string()))?;
    body.push(b'\n');
    write_file(dir, name, &body)
}

/// CSV with a version line; rows are already formatted.
fn write_csv(dir: &Path, name: &str, kind: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut body = format!("# teugels-{kind} v1\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        let io = |e: csv::Error| CliError::Failure(e.to_string());
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Failure(e.to_string()))?;
    }
    write_file(dir, name, &body)
}

fn cell(v: f64) -> String {
    v.to_string()
}

#[derive(Serialize)]
struct Manifest<'a, T: Serialize> {
    format: &'static str,
    version: &'static str,
    command: &'a str,
    experiment: Option<&'a str>,
    seed: u64,
    config: &'a RunConfig,
    result: T,
}

fn write_manifest<T: Serialize>(run: &Run, command: &str, experiment: Option<&str>, result: T) -> Result<(), CliError> {
    write_json(
        &run.out,
        "manifest.json",
        &Manifest {
            format: "teugels-manifest v1",
            version: env!("CARGO_PKG_VERSION"),
            command,
            experiment,
            seed: run.seed,
            config: &run.cfg,
            result,
        },
    )
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn execute(command: &Command, common: &CommonArgs, experiment: Option<ExperimentKind>) -> Result<bool, CliError> {
    let run = load(common)?;
    match command {
        Command::Basis(_) => cmd_basis(&run),
        Command::Simulate(_) => cmd_simulate(&run),
        Command::Solve(_) => cmd_solve(&run),
        Command::Verify { .. } => {
            let kind = experiment
                .or(run.cfg.experiment.kind)
                .ok_or_else(|| CliError::Config("no experiment: pass --experiment or set experiment.kind".into()))?;
            cmd_verify(&run, kind)
        }
    }
}

#[derive(Serialize)]
struct BasisReport<'a> {
    format: &'static str,
    k_requested: usize,
    k_eff: usize,
    lemma_residual: f64,
    orthonormality_residual: f64,
    tolerance: f64,
    verdict: &'a str,
}

fn cmd_basis(run: &Run) -> Result<bool, CliError> {
    let nz = noise(&run.cfg)?;
    let basis: &TeugelsBasis = &nz.basis;
    let lemma = check_lemma_identity(basis, &nz.model).map_err(|e| CliError::Failure(e.to_string()))?;
    let ortho = basis
        .orthonormality_residual(&nz.model)
        .map_err(|e| CliError::Failure(e.to_string()))?;
    let pass = lemma <= BASIS_TOLERANCE && ortho <= BASIS_TOLERANCE;
    write_file(&run.out, "basis.toml", basis.to_export_string().as_bytes())?;
    let report = BasisReport {
        format: "teugels-basis-report v1",
        k_requested: basis.k_requested,
        k_eff: basis.k_eff,
        lemma_residual: lemma,
        orthonormality_residual: ortho,
        tolerance: BASIS_TOLERANCE,
        verdict: verdict(pass),
    };
    write_json(&run.out, "basis_report.json", &report)?;
    write_manifest(run, "basis", None, &report)?;
    println!(
        "basis: K_eff = {} (requested {}), lemma residual {lemma:e}, orthonormality residual {ortho:e}: {}",
        basis.k_eff,
        basis.k_requested,
        verdict(pass)
    );
    Ok(pass)
}

fn cmd_simulate(run: &Run) -> Result<bool, CliError> {
    let nz = noise(&run.cfg)?;
    let grid = TimeGrid::uniform(run.cfg.grid.horizon, run.cfg.grid.n_steps).map_err(config_err)?;
    let bundle = simulate(&nz.model, &nz.basis, &grid, run.cfg.solver.n_paths, run.seed).map_err(config_err)?;
    let mut body = Vec::new();
    export_bundle(&bundle, &mut body).map_err(|e| CliError::Failure(e.to_string()))?;
    write_file(&run.out, "bundle.csv", &body)?;
    let report = martingale_diagnostics(&bundle);
    write_manifest(run, "simulate", None, &report)?;
    println!(
        "simulate: {} paths x {} steps x {} channels, max |z| of brackets {:.3}",
        bundle.n_paths,
        grid.n_steps(),
        bundle.k_eff,
        report.max_abs_z()
    );
    Ok(true)
}

#[derive(Serialize)]
struct SolveResult<'a> {
    v0: f64,
    lipschitz: f64,
    terminal_lipschitz: f64,
    lipschitz_audit: &'a crate::fbsde_problem::LipschitzAudit,
    outcome: &'a crate::solver::GlueOutcome,
    terminal_lipschitz_estimates: Vec<f64>,
    budget_status: &'a str,
    y0: f64,
    y0_se: f64,
    solution_norm: f64,
}

fn audit_options(seed: u64) -> ProbeOptions {
    ProbeOptions {
        seed: derive_seed(seed, AUDIT_STREAM),
        ..ProbeOptions::default()
    }
}

fn cmd_solve(run: &Run) -> Result<bool, CliError> {
    let nz = noise(&run.cfg)?;
    let p = problem(run, &nz)?;
    let v0 = check_v0(&p, 101).map_err(config_err)?;
    let audit = lipschitz_audit(&p, &audit_options(run.seed));
    if !audit.pass {
        return Err(CliError::Config(format!(
            "declared Lipschitz constants (λ = {}, λ₀ = {}) are exceeded: {audit:?}",
            p.lipschitz, p.terminal_lipschitz
        )));
    }
    let outcome = glue_solve(&p, &nz, &run.cfg.solver, run.seed)?;
    let sol = &outcome.solution;
    let budget_status = if outcome.budget_breaches.is_empty() {
        "within budget"
    } else {
        "budget exceeded"
    };
    let result = SolveResult {
        v0,
        lipschitz: p.lipschitz,
        terminal_lipschitz: p.terminal_lipschitz,
        lipschitz_audit: &audit,
        outcome: &outcome,
        terminal_lipschitz_estimates: outcome.terminal_functions.iter().map(|g| g.lipschitz_estimate).collect(),
        budget_status,
        y0: sol.y0,
        y0_se: sol.y0_se,
        solution_norm: solution_norm(sol),
    };
    write_manifest(run, "solve", None, &result)?;

    let k = sol.channels;
    let n = sol.n_steps();
    let mut header: Vec<String> = ["step", "t", "x_mean", "x_sd", "y_mean", "y_sd"].map(String::from).to_vec();
    header.extend((1..=k).map(|i| format!("z{i}_mean")));
    let stats = |v: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = v.collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
        (m, sd)
    };
    let rows: Vec<Vec<String>> = (0..=n)
        .map(|s| {
            let (xm, xs) = stats(&mut (0..sol.n_paths).map(|p| sol.x_at(p, s)));
            let (ym, ys) = stats(&mut (0..sol.n_paths).map(|p| sol.y_at(p, s)));
            let mut r = vec![s.to_string(), cell(sol.t_start + sol.grid.points()[s]), cell(xm), cell(xs), cell(ym), cell(ys)];
            for c in 0..k {
                if s < n {
                    r.push(cell(stats(&mut (0..sol.n_paths).map(|p| sol.z_at(p, s)[c])).0));
                } else {
                    r.push(String::new());
                }
            }
            r
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&run.out, "solution_summary.csv", "solution", &header_refs, &rows)?;
    println!(
        "solve: delta {} over {} segment(s), y0 = {} ± {} (λ̄₀ budget {}: {budget_status})",
        outcome.plan.delta,
        outcome.plan.segments,
        sol.y0,
        sol.y0_se,
        outcome.budget
    );
    Ok(true)
}

#[derive(Serialize)]
struct Summary<'a, T: Serialize> {
    format: &'static str,
    experiment: &'a str,
    seed: u64,
    verdict: &'a str,
    details: T,
}

fn finish<T: Serialize>(run: &Run, kind: ExperimentKind, pass: bool, details: T) -> Result<bool, CliError> {
    let name = kind.name();
    let summary = Summary {
        format: "teugels-experiment v1",
        experiment: name,
        seed: run.seed,
        verdict: verdict(pass),
        details,
    };
    write_json(&run.out, &format!("{name}_summary.json"), &summary)?;
    write_manifest(run, "verify", Some(name), &summary)?;
    Ok(pass)
}

/// Writes a HYPOTHESIS_VIOLATED summary before reporting the violation.
fn hypothesis<T>(run: &Run, kind: ExperimentKind, r: Result<T, AnalysisError>) -> Result<T, CliError> {
    match r {
        Err(AnalysisError::HypothesisViolated(msg)) => {
            let summary = Summary {
                format: "teugels-experiment v1",
                experiment: kind.name(),
                seed: run.seed,
                verdict: "HYPOTHESIS_VIOLATED",
                details: &msg,
            };
            write_json(&run.out, &format!("{}_summary.json", kind.name()), &summary)?;
            Err(CliError::Hypothesis(msg))
        }
        other => other.map_err(CliError::from),
    }
}

fn cmd_verify(run: &Run, kind: ExperimentKind) -> Result<bool, CliError> {
    let cfg = &run.cfg;
    let ex = &cfg.experiment;
    let nz = noise(cfg)?;
    let name = kind.name();
    let exp = Experiment {
        noise: &nz,
        solver: &cfg.solver,
        seed: run.seed,
    };
    match kind {
        ExperimentKind::Stability => {
            let p = problem(run, &nz)?;
            let r = stability_experiment(&p, &ex.perturbation, &exp)?;
            let rows: Vec<Vec<String>> = r
                .rows
                .iter()
                .map(|w| vec![cell(w.eps), cell(w.distance), cell(w.distance_se), cell(w.data_term), cell(w.ratio), cell(w.delta_y0)])
                .collect();
            write_csv(&run.out, "stability.csv", "stability", &["eps", "distance", "distance_se", "data_term", "ratio", "delta_y0"], &rows)?;
            println!(
                "stability: ratio spread {:.4}, eps = 0 exact: {}: {}",
                r.ratio_spread,
                r.zero_is_exact,
                verdict(r.pass)
            );
            finish(run, kind, r.pass, &r)
        }
        ExperimentKind::Convergence => {
            let p = problem(run, &nz)?;
            let r = convergence_experiment(&p, &ex.perturbation.targets, ex.perturbation.direction, ex.scale, ex.levels, &exp)?;
            let rows: Vec<Vec<String>> = r
                .rows
                .iter()
                .map(|w| vec![w.level.to_string(), cell(w.eps), cell(w.distance), cell(w.distance_se), cell(w.ratio_to_previous)])
                .collect();
            write_csv(&run.out, "convergence.csv", "convergence", &["level", "eps", "distance", "distance_se", "ratio_to_previous"], &rows)?;
            println!("convergence: {} levels: {}", r.rows.len(), verdict(r.pass));
            finish(run, kind, r.pass, &r)
        }
        ExperimentKind::Comparison => {
            let p0 = problem(run, &nz)?;
            let p1 = perturb(&p0, &ex.shift_targets, ex.shift_direction, ex.shift);
            let r = hypothesis(run, kind, comparison_experiment(&p0, &p1, &ex.comparison, &exp))?;
            let rows = vec![vec![cell(r.y0_0), cell(r.y0_1), cell(r.difference), cell(r.std_error), cell(r.z_score)]];
            write_csv(&run.out, "comparison.csv", "comparison", &["y0_0", "y0_1", "difference", "std_error", "z_score"], &rows)?;
            println!(
                "comparison: y0_1 - y0_0 = {} (SE {}, z {}): {}",
                r.difference,
                r.std_error,
                r.z_score,
                verdict(r.pass)
            );
            finish(run, kind, r.pass, &r)
        }
        ExperimentKind::Linear => {
            let cases = ex.linear_cases.clone().unwrap_or_else(builtin_linear_cases);
            let mut reports = Vec::new();
            for case in &cases {
                reports.push(hypothesis(run, kind, linear_proposition_check(case, &exp))?);
            }
            let rows: Vec<Vec<String>> = reports
                .iter()
                .map(|r| {
                    vec![
                        r.name.clone(),
                        cell(r.y0),
                        cell(r.std_error),
                        r.expected.map(cell).unwrap_or_default(),
                        verdict(r.pass).to_string(),
                    ]
                })
                .collect();
            write_csv(&run.out, "linear.csv", "linear", &["case", "y0", "std_error", "expected", "verdict"], &rows)?;
            let pass = reports.iter().all(|r| r.pass);
            for r in &reports {
                println!("linear {}: y0 = {} ± {}: {}", r.name, r.y0, r.std_error, verdict(r.pass));
            }
            finish(run, kind, pass, &reports)
        }
        ExperimentKind::Brackets => {
            let grid = TimeGrid::uniform(cfg.grid.horizon, cfg.grid.n_steps).map_err(config_err)?;
            let bundle = simulate(&nz.model, &nz.basis, &grid, ex.bracket_paths, run.seed).map_err(config_err)?;
            let r = martingale_diagnostics(&bundle);
            let pass = r.passes(ex.bracket_bound);
            let mut rows = Vec::new();
            for i in 0..r.k_eff {
                for j in 0..r.k_eff {
                    rows.push(vec![
                        (i + 1).to_string(),
                        (j + 1).to_string(),
                        cell(r.cov[i][j]),
                        cell(r.error[i][j]),
                        cell(r.std_error[i][j]),
                        cell(r.z[i][j]),
                    ]);
                }
            }
            write_csv(&run.out, "brackets.csv", "brackets", &["i", "j", "cov", "error", "std_error", "z"], &rows)?;
            println!(
                "brackets: K_eff = {}, max |z| {:.3} (bound {}): {}",
                r.k_eff,
                r.max_abs_z(),
                ex.bracket_bound,
                verdict(pass)
            );
            finish(run, kind, pass, &r)
        }
        ExperimentKind::H2 => {
            let p = problem(run, &nz)?;
            let r = check_h2(&p, &ex.h2);
            let rows = vec![vec![
                r.probes.to_string(),
                cell(r.max_product),
                cell(r.max_balance),
                cell(r.tolerance),
                verdict(r.pass).to_string(),
            ]];
            write_csv(&run.out, "h2.csv", "h2", &["probes", "max_product", "max_balance", "tolerance", "verdict"], &rows)?;
            if !r.pass {
                eprintln!(
                    "h2: residuals exceed {}: product {}, balance {} at (t, x, y) = {:?}",
                    r.tolerance, r.max_product, r.max_balance, r.worst_point
                );
            }
            println!("{name}: {}", verdict(r.pass));
            finish(run, kind, r.pass, &r)
        }
    }
}

/// Flushes stdout; failures to print are not worth a nonzero exit.
pub fn flush_stdout() {
    let _ = std::io::stdout().flush();
}
